"""splatbridge: HTTP edit/guidance service speaking the scene-editor wire protocol."""

__version__ = "0.1.0"
