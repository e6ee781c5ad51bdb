"""Flat key = value run configuration.

One UTF-8 text file covers every pipeline parameter ('#' starts a comment).
Unknown keys are rejected; command-line overrides win over file values; the
fully-resolved mapping is logged into each run's provenance record.
"""

from __future__ import annotations

import re
from pathlib import Path

from .errors import ValidationError
from .scene_io import BlobSpec, SynthSpec, default_synth_spec


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got '{raw}'")


def _parse_vec3(raw) -> tuple[float, float, float]:
    if isinstance(raw, (tuple, list)):
        vals = [float(v) for v in raw]
    else:
        vals = [float(v) for v in str(raw).split(",")]
    if len(vals) != 3:
        raise ValidationError(f"expected three comma-separated numbers, got '{raw}'")
    return tuple(vals)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "vec3": _parse_vec3,
}

# key -> (type, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "background": ("vec3", (0.0, 0.0, 0.0)),
    # synthetic scene
    "synth_cameras": ("int", 8),
    "synth_image_size": ("int", 64),
    "synth_timesteps": ("int", 10),
    "synth_rig_radius": ("float", 4.0),
    "synth_rig_height": ("float", 1.2),
    "synth_fov_deg": ("float", 45.0),
    "synth_fps": ("float", 10.0),
    "synth_bbox_min": ("vec3", (-1.5, -1.5, -1.5)),
    "synth_bbox_max": ("vec3", (1.5, 1.5, 1.5)),
    "synth_num_blobs": ("int", -1),  # -1: use the built-in three-blob preset
    # model
    "model_points": ("int", 192),
    "model_sh_degree": ("int", 1),
    "model_init_from_gt": ("bool", True),
    "model_init_jitter": ("float", 0.05),
    "field_channels": ("int", 32),
    "field_base_res": ("int", 64),
    "field_time_res": ("int", 32),
    "field_hidden": ("int", 64),
    # stage 0 training
    "train_iterations": ("int", 1500),
    "train_coarse_iterations": ("int", 300),
    "train_batch": ("int", 2),
    "lambda_tv": ("float", 1e-4),
    "train_eval_interval": ("int", 100),
    "holdout_camera": ("int", -1),  # -1: highest camera id; -2: no holdout
    "lr_positions": ("float", 1.6e-4),
    "lr_sh": ("float", 2.5e-3),
    "lr_opacity": ("float", 5e-2),
    "lr_scales": ("float", 5e-3),
    "lr_rotations": ("float", 5e-3),
    "lr_grids": ("float", 1.6e-3),
    "lr_mlps": ("float", 1.6e-4),
    # stage 1 editing
    "edit_iterations": ("int", 800),
    "edit_batch": ("int", 2),
    "edit_sh_lr_scale": ("float", 4.0),
    # stage 2 refinement
    "refine_iterations": ("int", 800),
    "refine_batch": ("int", 4),
    "s_image": ("float", 1.2),
    "s_text": ("float", 8.5),
    "t_min": ("float", 0.02),
    "t_max": ("float", 0.98),
    "refine_t_per_image": ("bool", False),
    "refine_lr_scale": ("float", 1.0),
    # renderer
    "truncation_sigma": ("float", 3.0),
    "near_plane": ("float", 0.01),
    # external guidance
    "guidance_timeout": ("float", 30.0),
}

_BLOB_KEY = re.compile(
    r"^blob(\d+)_(color|center|scale|count|path|velocity|orbit_radius|orbit_rate)$"
)
_BLOB_TYPES = {
    "color": "vec3",
    "center": "vec3",
    "scale": "float",
    "count": "int",
    "path": "str",
    "velocity": "vec3",
    "orbit_radius": "float",
    "orbit_rate": "float",
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got '{line.strip()}'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ValidationError(f"{source}:{lineno}: duplicate key '{key}'")
        raw[key] = value
    return raw


def _coerce(key: str, value) -> object:
    blob_match = _BLOB_KEY.match(key)
    if blob_match:
        type_name = _BLOB_TYPES[blob_match.group(2)]
    elif key in SCHEMA:
        type_name = SCHEMA[key][0]
    else:
        raise ValidationError(f"unknown config key '{key}'")
    try:
        return _PARSERS[type_name](value)
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config key '{key}': {exc}") from exc


def resolve_config(config_path=None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- overrides; returns the fully-resolved mapping."""
    resolved: dict[str, object] = {k: default for k, (_t, default) in SCHEMA.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text(), str(path)).items():
            resolved[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        resolved[key] = _coerce(key, value)
    return resolved


def synth_spec_from_config(cfg: dict) -> SynthSpec:
    spec = default_synth_spec()
    spec.num_cameras = cfg["synth_cameras"]
    spec.image_size = cfg["synth_image_size"]
    spec.num_timesteps = cfg["synth_timesteps"]
    spec.rig_radius = cfg["synth_rig_radius"]
    spec.rig_height = cfg["synth_rig_height"]
    spec.fov_deg = cfg["synth_fov_deg"]
    spec.fps = cfg["synth_fps"]
    spec.bbox_min = cfg["synth_bbox_min"]
    spec.bbox_max = cfg["synth_bbox_max"]
    spec.background = cfg["background"]
    spec.seed = cfg["seed"]

    num_blobs = cfg["synth_num_blobs"]
    if num_blobs == 0:
        raise ValidationError("synth_num_blobs must be >= 1 (or -1 for the preset)")
    if num_blobs > 0:
        spec.blobs = [
            BlobSpec(color=(0.7, 0.7, 0.7), center=(0.0, 0.0, 0.0)) for _ in range(num_blobs)
        ]
    for key, value in cfg.items():
        m = _BLOB_KEY.match(key)
        if not m:
            continue
        idx, attr = int(m.group(1)), m.group(2)
        if idx >= len(spec.blobs):
            raise ValidationError(
                f"config key '{key}' refers to blob {idx}, but only "
                f"{len(spec.blobs)} blobs are defined"
            )
        setattr(spec.blobs[idx], attr, value)
    return spec


def format_config(cfg: dict) -> str:
    """Render a resolved config back to the key = value format."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
