"""Mock-mode semantics: procedural edit operators and the analytic guidance
residual.

These mirror the engine-side definitions exactly; they live on this side of
the wire so the service never has to import the engine. The mock guidance
treats the operator-edited original as the target of a point-mass diffusion
model and returns the closed-form residual
``sqrt(a/(1-a)) * (rendered - target)`` at cumulative signal
``a = cos^2(pi t / 2)``. Targets are rounded through float32 first, the
wire dtype, so a client that streams back exactly the edited image receives
exactly-zero gradients.
"""

from __future__ import annotations

import math

import numpy as np

OPERATOR_KINDS = ("grayscale", "sepia", "hue_rotate", "posterize", "vignette")

_SEPIA = np.array(
    [
        [0.393, 0.769, 0.189],
        [0.349, 0.686, 0.168],
        [0.272, 0.534, 0.131],
    ]
)
_HUE_BASE = np.array([[0.213, 0.715, 0.072]] * 3)
_HUE_COS = np.array(
    [
        [0.787, -0.715, -0.072],
        [-0.213, 0.285, -0.072],
        [-0.213, -0.715, 0.928],
    ]
)
_HUE_SIN = np.array(
    [
        [-0.213, -0.715, 0.928],
        [0.143, 0.140, -0.283],
        [-0.787, 0.715, 0.072],
    ]
)


def apply_operator(kind: str, params: dict, img: np.ndarray) -> np.ndarray:
    if kind == "grayscale":
        luma = img @ np.array([0.2126, 0.7152, 0.0722])
        return np.repeat(luma[..., None], 3, axis=2)
    if kind == "sepia":
        return np.clip(img @ _SEPIA.T, 0.0, 1.0)
    if kind == "hue_rotate":
        theta = math.radians(float(params.get("degrees", 0.0)))
        m = _HUE_BASE + math.cos(theta) * _HUE_COS + math.sin(theta) * _HUE_SIN
        return np.clip(img @ m.T, 0.0, 1.0)
    if kind == "posterize":
        levels = int(params.get("levels", 4))
        if levels < 2:
            raise ValueError("posterize: levels must be >= 2")
        return np.floor(img * (levels - 1) + 0.5) / (levels - 1)
    if kind == "vignette":
        strength = float(params.get("strength", 0.5))
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        factor = np.clip(1.0 - strength * r2 / (cy**2 + cx**2), 0.0, 1.0)
        return img * factor[..., None]
    raise ValueError(f"unknown operator kind '{kind}'")


def alpha_bar(t: float) -> float:
    """Cosine cumulative-signal schedule; valid strictly inside (0, 1)."""
    if not (0.0 < t < 1.0):
        raise ValueError(f"diffusion time t={t} must lie strictly inside (0, 1)")
    return math.cos(math.pi * t / 2.0) ** 2


def oracle_residual(rendered: np.ndarray, target: np.ndarray, t: float) -> np.ndarray:
    a = alpha_bar(t)
    gain = math.sqrt(a / (1.0 - a))
    target_wire = target.astype(np.float32).astype(np.float64)
    return gain * (rendered - target_wire)
