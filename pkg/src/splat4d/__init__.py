"""splat4d: desk-scale 4D Gaussian splatting with instruction-guided editing."""

__version__ = "0.1.0"
