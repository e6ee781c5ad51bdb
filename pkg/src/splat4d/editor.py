"""Stage 1: edit the first-timestep views, then refit the canonical cloud.

Only the multiview images at t=0 are edited (procedurally, or by an external
edit service) and only cloud parameters move during the fit; the deformation
field is frozen, so the result is the edited canonical cloud recombined with
the original field. Supervision renders the deformed cloud at t=0, which is
what the edited images depict; gradients still reach only the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import bridge_client as bc
from . import hexplane as hx
from . import renderer as rn
from . import trainer as tr
from .errors import ValidationError
from .gaussians import Camera
from .scene_io import Dataset
from .trainer import SceneModel, TrainingAborted, _Snapshot

BUILTIN_KINDS = ("grayscale", "sepia", "hue_rotate", "posterize", "vignette")

SEPIA_MATRIX = np.array(
    [
        [0.393, 0.769, 0.189],
        [0.349, 0.686, 0.168],
        [0.272, 0.534, 0.131],
    ]
)

# SVG feColorMatrix hueRotate decomposition: M = BASE + cos(a)*COS + sin(a)*SIN.
HUE_BASE = np.array([[0.213, 0.715, 0.072]] * 3)
HUE_COS = np.array(
    [
        [0.787, -0.715, -0.072],
        [-0.213, 0.285, -0.072],
        [-0.213, -0.715, 0.928],
    ]
)
HUE_SIN = np.array(
    [
        [-0.213, -0.715, 0.928],
        [0.143, 0.140, -0.283],
        [-0.787, 0.715, 0.072],
    ]
)


@dataclass
class EditOperator:
    """Deterministic image edit: a builtin procedural kind or an external bridge."""

    kind: str
    params: dict = dc_field(default_factory=dict)
    seed: int = 0
    url: str | None = None  # required for kind == "external"

    def __post_init__(self):
        if self.kind not in BUILTIN_KINDS + ("external",):
            raise ValidationError(
                f"EditOperator: unknown kind '{self.kind}' "
                f"(builtins: {', '.join(BUILTIN_KINDS)}, or 'external')"
            )
        if self.kind == "external" and not self.url:
            raise ValidationError("EditOperator: kind 'external' requires a url")


@dataclass
class EditedViewSet:
    views: list[tuple[Camera, np.ndarray]]  # all at timestep t=0
    instruction: str

    def __post_init__(self):
        if not self.views:
            raise ValidationError("EditedViewSet: at least one view required")
        shapes = {v.shape for _c, v in self.views}
        if len(shapes) > 1:
            raise ValidationError(f"EditedViewSet: images differ in shape: {shapes}")
        ids = [c.cam_id for c, _v in self.views]
        if len(set(ids)) != len(ids):
            raise ValidationError("EditedViewSet: cameras must be distinct")


def apply_image(op: EditOperator, img: np.ndarray) -> np.ndarray:
    """Apply a builtin operator to one float image in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if op.kind == "grayscale":
        luma = img @ np.array([0.2126, 0.7152, 0.0722])
        return np.repeat(luma[..., None], 3, axis=2)
    if op.kind == "sepia":
        return np.clip(img @ SEPIA_MATRIX.T, 0.0, 1.0)
    if op.kind == "hue_rotate":
        theta = np.deg2rad(float(op.params.get("degrees", 0.0)))
        m = HUE_BASE + np.cos(theta) * HUE_COS + np.sin(theta) * HUE_SIN
        return np.clip(img @ m.T, 0.0, 1.0)
    if op.kind == "posterize":
        levels = int(op.params.get("levels", 4))
        if levels < 2:
            raise ValidationError("posterize: levels must be >= 2")
        return np.floor(img * (levels - 1) + 0.5) / (levels - 1)
    if op.kind == "vignette":
        strength = float(op.params.get("strength", 0.5))
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        r2max = cy**2 + cx**2
        factor = np.clip(1.0 - strength * r2 / r2max, 0.0, 1.0)
        return img * factor[..., None]
    raise ValidationError(f"apply_image: '{op.kind}' is not a builtin operator")


def collect_first_timestep(dataset: Dataset, subset=None) -> list[tuple[Camera, np.ndarray]]:
    """The t=0 view per requested camera, ordered by camera id."""
    ids = sorted(dataset.camera_ids) if subset is None else sorted(subset)
    views = []
    for cam_id in ids:
        if cam_id not in dataset.camera_ids:
            raise ValidationError(f"collect_first_timestep: unknown camera id {cam_id}")
        views.append((dataset.camera(cam_id), dataset.load_frame(cam_id, 0)))
    return views


def apply_operator(op: EditOperator, views, instruction: str,
                   s_image: float = 1.2, s_text: float = 8.5) -> EditedViewSet:
    if not views:
        raise ValidationError("apply_operator: views must be non-empty")
    if op.kind == "external":
        images = bc.post_edit(
            op.url, [img for _c, img in views], instruction, s_image, s_text, op.seed
        )
        edited = list(zip([c for c, _img in views], images))
    else:
        edited = [(c, apply_image(op, img)) for c, img in views]
    return EditedViewSet(views=edited, instruction=instruction)


def fit_canonical(
    model: SceneModel,
    edited: EditedViewSet,
    iters: int = 800,
    learning_rates: dict | None = None,
    sh_lr_scale: float = 4.0,
    batch: int = 2,
    seed: int = 0,
    background=(0.0, 0.0, 0.0),
    settings: rn.RenderSettings = rn.RenderSettings(),
) -> tuple[SceneModel, list[dict]]:
    """L1-fit the cloud to the edited t=0 views; the field stays frozen.

    Each step renders the deformed cloud at t=0 for a sampled batch of views.
    Appearance edits are mostly chromatic, so the SH rate is raised by
    `sh_lr_scale`.
    """
    if iters < 0:
        raise ValidationError(f"fit_canonical: iters must be >= 0, got {iters}")
    lrs = dict(tr.DEFAULT_LEARNING_RATES)
    if learning_rates:
        lrs.update(learning_rates)

    model.field.set_trainable(False)
    model.cloud.set_trainable(True)
    opt = tr.Adam(tr.cloud_param_groups(model.cloud, lrs, sh_lr_scale=sh_lr_scale))
    rng = np.random.default_rng(seed)

    cloud_params = {f"cloud.{k}": v for k, v in model.cloud.parameters().items()}
    good = _Snapshot(cloud_params)
    rows: list[dict] = []
    batch = max(1, min(batch, len(edited.views)))
    try:
        for step in range(iters):
            picks = rng.integers(0, len(edited.views), size=batch)
            per_image = []
            for pi in picks:
                cam, target = edited.views[int(pi)]
                cloud_t0 = hx.deformed_cloud_at(model.field, model.cloud, 0.0)
                img = rn.render(cloud_t0, cam, background, settings)
                per_image.append(tr.l1_loss(img, target))
            loss = per_image[0]
            for term in per_image[1:]:
                loss = ad.add(loss, term)
            loss = ad.mul(loss, 1.0 / len(per_image))
            if not np.isfinite(loss.item()):
                good.restore(cloud_params)
                raise TrainingAborted(
                    f"fit_canonical: non-finite loss at step {step}; last-good state restored"
                )
            good.capture(cloud_params)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            rows.append({"step": step, "l1": loss.item()})
    finally:
        model.cloud.set_trainable(False)
    return model, rows


def stage1_l1(model: SceneModel, edited: EditedViewSet, background=(0.0, 0.0, 0.0),
              settings: rn.RenderSettings = rn.RenderSettings()) -> float:
    """Mean L1 between the deformed-at-t0 renders and the edited views."""
    vals = []
    for cam, target in edited.views:
        cloud_t0 = hx.deformed_cloud_at(model.field, model.cloud, 0.0)
        img = rn.render(cloud_t0, cam, background, settings)
        vals.append(float(np.mean(np.abs(img.rgb.data - target))))
    return float(np.mean(vals))
