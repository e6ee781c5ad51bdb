"""Dataset layout, PNG codec, and the synthetic ground-truth scene generator.

On-disk layout (all paths relative to the scene root):

    meta.json     {"num_timesteps": T, "fps": f, "bbox_min": [x,y,z], "bbox_max": [x,y,z]}
    cameras.json  [{"id", "width", "height", "fx", "fy", "cx", "cy",
                    "world_to_cam": [16 numbers, row-major]}, ...]
    frames/cam_<id>/<timestep, 5 digits>.png   8-bit RGB
    gt_model/     optional: ground-truth cloud checkpoint + analytic motion spec

The synthetic generator builds a small cloud of colored blobs, moves them
along analytic rigid paths (static / linear / circular), renders every
(camera, timestep) pair with the engine renderer, and writes the layout
above. Everything is seeded and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from . import gaussians as gs
from . import renderer as rn
from .autodiff import Tensor
from .errors import ValidationError
from .gaussians import Camera, GaussianCloud
from .hexplane import SceneBounds

FRAME_DIGITS = 5


# ---------------------------------------------------------------------------
# PNG round-trip


def save_png(img: np.ndarray, path) -> None:
    """Write a float image in [0,1] as 8-bit RGB; rounding is half-up."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"save_png: expected HxWx3 image, got shape {img.shape}")
    byte = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(byte, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - decode errors become ValidationError
        raise ValidationError(f"load_png: cannot decode {path}: {exc}") from exc
    return arr / 255.0


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    num_timesteps: int
    fps: float
    bounds: SceneBounds
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def camera_ids(self) -> list[int]:
        return [c.cam_id for c in self.cameras]

    def camera(self, cam_id: int) -> Camera:
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise ValidationError(f"Dataset: unknown camera id {cam_id}")

    def frame_path(self, cam_id: int, t_index: int) -> Path:
        return self.root / "frames" / f"cam_{cam_id}" / f"{t_index:0{FRAME_DIGITS}d}.png"

    def timestep_value(self, t_index: int) -> float:
        if self.num_timesteps <= 1:
            return 0.0
        return t_index / (self.num_timesteps - 1)

    def load_frame(self, cam_id: int, t_index: int) -> np.ndarray:
        key = (cam_id, t_index)
        if key not in self._cache:
            self._cache[key] = load_png(self.frame_path(cam_id, t_index))
        return self._cache[key]


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    cams_path = root / "cameras.json"
    if not meta_path.exists():
        raise ValidationError(f"load_dataset: missing {meta_path}")
    if not cams_path.exists():
        raise ValidationError(f"load_dataset: missing {cams_path}")
    meta = json.loads(meta_path.read_text())
    for key in ("num_timesteps", "fps", "bbox_min", "bbox_max"):
        if key not in meta:
            raise ValidationError(f"load_dataset: meta.json: missing field '{key}'")
    num_t = int(meta["num_timesteps"])
    if num_t <= 0:
        raise ValidationError("load_dataset: meta.json: num_timesteps must be positive")
    bounds = SceneBounds(meta["bbox_min"], meta["bbox_max"])

    cam_entries = json.loads(cams_path.read_text())
    if not isinstance(cam_entries, list) or not cam_entries:
        raise ValidationError("load_dataset: cameras.json: expected a non-empty list")
    cameras = []
    seen_ids = set()
    for idx, entry in enumerate(cam_entries):
        where = f"cameras.json[{idx}]"
        for key in ("id", "width", "height", "fx", "fy", "cx", "cy", "world_to_cam"):
            if key not in entry:
                raise ValidationError(f"load_dataset: {where}: missing field '{key}'")
        if entry["fx"] <= 0 or entry["fy"] <= 0:
            bad = "fx" if entry["fx"] <= 0 else "fy"
            raise ValidationError(f"load_dataset: {where}: field '{bad}' must be positive")
        if entry["id"] in seen_ids:
            raise ValidationError(f"load_dataset: {where}: duplicate camera id {entry['id']}")
        seen_ids.add(entry["id"])
        w2c = np.asarray(entry["world_to_cam"], dtype=np.float64)
        if w2c.size != 16:
            raise ValidationError(f"load_dataset: {where}: world_to_cam needs 16 numbers")
        try:
            cameras.append(
                Camera(
                    fx=float(entry["fx"]), fy=float(entry["fy"]),
                    cx=float(entry["cx"]), cy=float(entry["cy"]),
                    width=int(entry["width"]), height=int(entry["height"]),
                    world_to_cam=w2c.reshape(4, 4), cam_id=int(entry["id"]),
                )
            )
        except ValueError as exc:
            raise ValidationError(f"load_dataset: {where}: {exc}") from exc
    cameras.sort(key=lambda c: c.cam_id)  # camera ids define ordering, not file order

    ds = Dataset(root=root, cameras=cameras, num_timesteps=num_t,
                 fps=float(meta["fps"]), bounds=bounds)
    for cam in cameras:
        for t in range(num_t):
            fp = ds.frame_path(cam.cam_id, t)
            if not fp.exists():
                raise ValidationError(
                    f"load_dataset: missing frame for (camera {cam.cam_id}, t {t}): {fp}"
                )
            with Image.open(fp) as im:
                if im.size != (cam.width, cam.height):
                    raise ValidationError(
                        f"load_dataset: frame (camera {cam.cam_id}, t {t}) is "
                        f"{im.size[0]}x{im.size[1]}, camera declares {cam.width}x{cam.height}"
                    )
    return ds


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class BlobSpec:
    color: tuple[float, float, float]
    center: tuple[float, float, float]
    scale: float = 0.2
    count: int = 5
    path: str = "static"                    # static | linear | circular
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orbit_radius: float = 0.3
    orbit_rate: float = 1.0                 # turns over t in [0, 1]


@dataclass
class SynthSpec:
    blobs: list[BlobSpec]
    num_cameras: int = 8
    rig_radius: float = 4.0
    rig_height: float = 1.2
    fov_deg: float = 45.0
    image_size: int = 64
    num_timesteps: int = 10
    fps: float = 10.0
    bbox_min: tuple[float, float, float] = (-1.5, -1.5, -1.5)
    bbox_max: tuple[float, float, float] = (1.5, 1.5, 1.5)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self) -> None:
        if not self.blobs:
            raise ValidationError("SynthSpec: at least one blob required")
        if self.num_cameras < 1:
            raise ValidationError("SynthSpec: num_cameras must be >= 1")
        if self.image_size < 16:
            raise ValidationError("SynthSpec: image_size must be >= 16")
        if self.num_timesteps < 1:
            raise ValidationError("SynthSpec: num_timesteps must be >= 1")
        lo = np.asarray(self.bbox_min)
        hi = np.asarray(self.bbox_max)
        for bi, blob in enumerate(self.blobs):
            if blob.path not in ("static", "linear", "circular"):
                raise ValidationError(f"SynthSpec: blobs[{bi}]: unknown path '{blob.path}'")
            for t in np.linspace(0.0, 1.0, 65):
                p = np.asarray(blob.center) + blob_offset(blob, float(t))
                if np.any(p < lo) or np.any(p > hi):
                    raise ValidationError(
                        f"SynthSpec: blobs[{bi}] leaves the bbox at t={t:.3f}"
                    )


def default_synth_spec() -> SynthSpec:
    """8 cameras on a circle, 64x64, T=10, three blobs: static, linear, circular."""
    return SynthSpec(
        blobs=[
            BlobSpec(color=(0.85, 0.25, 0.2), center=(0.5, -0.4, 0.0), scale=0.22,
                     path="static"),
            BlobSpec(color=(0.2, 0.8, 0.3), center=(-0.6, -0.3, -0.2), scale=0.18,
                     path="linear", velocity=(0.5, 0.35, 0.15)),
            BlobSpec(color=(0.25, 0.4, 0.9), center=(0.0, 0.45, 0.3), scale=0.2,
                     path="circular", orbit_radius=0.35, orbit_rate=1.0),
        ]
    )


def blob_offset(blob: BlobSpec, t: float) -> np.ndarray:
    """Analytic rigid displacement of a blob at normalized time t."""
    if blob.path == "static":
        return np.zeros(3)
    if blob.path == "linear":
        return t * np.asarray(blob.velocity, dtype=np.float64)
    if blob.path == "circular":
        ang = 2.0 * np.pi * blob.orbit_rate * t
        return blob.orbit_radius * np.array([np.cos(ang) - 1.0, np.sin(ang), 0.0])
    raise ValidationError(f"blob_offset: unknown path '{blob.path}'")


@dataclass
class GroundTruthMotion:
    blob_index: np.ndarray  # (N,) blob id per Gaussian
    blobs: list[BlobSpec]

    def offsets(self, t: float) -> np.ndarray:
        per_blob = np.stack([blob_offset(b, t) for b in self.blobs])
        return per_blob[self.blob_index]

    def deformed_positions(self, base: np.ndarray, t: float) -> np.ndarray:
        return base + self.offsets(t)


def build_rig(spec: SynthSpec) -> list[Camera]:
    size = spec.image_size
    fx = (size / 2.0) / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    c = (size - 1) / 2.0
    cameras = []
    for i in range(spec.num_cameras):
        ang = 2.0 * np.pi * i / spec.num_cameras
        eye = (spec.rig_radius * np.cos(ang), spec.rig_radius * np.sin(ang), spec.rig_height)
        cameras.append(
            gs.look_at_camera(
                eye, (0.0, 0.0, 0.0), fx=fx, fy=fx, cx=c, cy=c,
                width=size, height=size, cam_id=i,
            )
        )
    return cameras


def build_ground_truth(spec: SynthSpec) -> tuple[GaussianCloud, GroundTruthMotion]:
    """Sample per-blob Gaussian clusters; canonical positions are the t=0 state."""
    rng = np.random.default_rng(spec.seed)
    positions, log_scales, logits, sh, blob_index = [], [], [], [], []
    for bi, blob in enumerate(spec.blobs):
        color = np.asarray(blob.color, dtype=np.float64)
        for _ in range(blob.count):
            positions.append(np.asarray(blob.center) + rng.normal(scale=blob.scale * 0.45, size=3))
            log_scales.append(np.log(blob.scale * 0.55) + rng.normal(scale=0.15, size=3))
            logits.append([2.2])
            dc = (color - 0.5) / gs.SH_C0 + rng.normal(scale=0.02, size=3)
            band1 = rng.normal(scale=0.08, size=(3, 3))
            sh.append(np.concatenate([dc[None, :], band1], axis=0))
            blob_index.append(bi)
    cloud = GaussianCloud(
        positions=Tensor(np.asarray(positions)),
        log_scales=Tensor(np.asarray(log_scales)),
        rotations=Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (len(positions), 1))),
        opacity_logits=Tensor(np.asarray(logits)),
        sh_coeffs=Tensor(np.asarray(sh)),
        sh_degree=1,
    )
    motion = GroundTruthMotion(blob_index=np.asarray(blob_index), blobs=list(spec.blobs))
    return cloud, motion


def gt_cloud_at(cloud: GaussianCloud, motion: GroundTruthMotion, t: float) -> GaussianCloud:
    moved = motion.deformed_positions(cloud.positions.data, t)
    return GaussianCloud(
        positions=Tensor(moved),
        log_scales=cloud.log_scales,
        rotations=cloud.rotations,
        opacity_logits=cloud.opacity_logits,
        sh_coeffs=cloud.sh_coeffs,
        sh_degree=cloud.sh_degree,
    )


def _motion_to_json(motion: GroundTruthMotion) -> dict:
    return {
        "blob_index": motion.blob_index.tolist(),
        "blobs": [
            {
                "path": b.path,
                "velocity": list(b.velocity),
                "orbit_radius": b.orbit_radius,
                "orbit_rate": b.orbit_rate,
                "center": list(b.center),
                "color": list(b.color),
                "scale": b.scale,
                "count": b.count,
            }
            for b in motion.blobs
        ],
    }


def load_ground_truth(scene_root) -> tuple[GaussianCloud, GroundTruthMotion]:
    root = Path(scene_root) / "gt_model"
    cloud = gs.load_cloud(root / "cloud.g4dc")
    raw = json.loads((root / "motion.json").read_text())
    blobs = [
        BlobSpec(
            color=tuple(b["color"]), center=tuple(b["center"]), scale=b["scale"],
            count=b["count"], path=b["path"], velocity=tuple(b["velocity"]),
            orbit_radius=b["orbit_radius"], orbit_rate=b["orbit_rate"],
        )
        for b in raw["blobs"]
    ]
    return cloud, GroundTruthMotion(blob_index=np.asarray(raw["blob_index"]), blobs=blobs)


def synth_generate(spec: SynthSpec, out_path) -> Dataset:
    """Render the analytic scene into the dataset layout; fully deterministic."""
    spec.validate()
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"synth_generate: output path not writable: {exc}") from exc

    cameras = build_rig(spec)
    cloud, motion = build_ground_truth(spec)

    meta = {
        "num_timesteps": spec.num_timesteps,
        "fps": spec.fps,
        "bbox_min": list(spec.bbox_min),
        "bbox_max": list(spec.bbox_max),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    cam_entries = [
        {
            "id": c.cam_id,
            "width": c.width,
            "height": c.height,
            "fx": c.fx,
            "fy": c.fy,
            "cx": c.cx,
            "cy": c.cy,
            "world_to_cam": [float(v) for v in c.world_to_cam.reshape(-1)],
        }
        for c in cameras
    ]
    (root / "cameras.json").write_text(json.dumps(cam_entries, indent=2) + "\n")

    t_values = [0.0] if spec.num_timesteps == 1 else [
        ti / (spec.num_timesteps - 1) for ti in range(spec.num_timesteps)
    ]
    for cam in cameras:
        for ti, t in enumerate(t_values):
            frame = rn.render(gt_cloud_at(cloud, motion, t), cam, spec.background)
            save_png(frame.rgb.data, root / "frames" / f"cam_{cam.cam_id}" / f"{ti:0{FRAME_DIGITS}d}.png")

    gt_dir = root / "gt_model"
    gt_dir.mkdir(exist_ok=True)
    gs.save_cloud(cloud, gt_dir / "cloud.g4dc")
    (gt_dir / "motion.json").write_text(
        json.dumps(_motion_to_json(motion), indent=2, sort_keys=True) + "\n"
    )
    return load_dataset(root)
