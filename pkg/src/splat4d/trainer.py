"""Scene optimization: fit a canonical cloud + deformation field to a
multiview video with an L1 photometric term plus grid total-variation.

The schedule is coarse-then-fine: for the first `coarse_iterations` steps
only the cloud trains against raw frames (the field stays frozen at its
identity initialization), then cloud and field optimize jointly. Every run
is exactly reproducible from (config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import hexplane as hx
from . import renderer as rn
from .autodiff import Tensor
from .gaussians import GaussianCloud, load_cloud, save_cloud
from .hexplane import HexplaneField, SceneBounds, load_field, save_field
from .metrics import psnr
from .scene_io import Dataset

DEFAULT_LEARNING_RATES = {
    "positions": 1.6e-4,
    "sh": 2.5e-3,
    "opacity": 5e-2,
    "scales": 5e-3,
    "rotations": 5e-3,
    "grids": 1.6e-3,
    "mlps": 1.6e-4,
}

METRICS_HEADER = ("step", "loss", "l1", "tv", "psnr_holdout")


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; the model keeps the last-good state."""


@dataclass
class SceneModel:
    cloud: GaussianCloud
    field: HexplaneField
    bounds: SceneBounds

    def __post_init__(self):
        if self.field.bounds is not self.bounds and not (
            np.array_equal(self.field.bounds.bbox_min, self.bounds.bbox_min)
            and np.array_equal(self.field.bounds.bbox_max, self.bounds.bbox_max)
        ):
            raise ValueError("SceneModel: cloud/field must share the same scene bounds")

    def parameters(self) -> dict[str, Tensor]:
        return {**{f"cloud.{k}": v for k, v in self.cloud.parameters().items()},
                **{f"field.{k}": v for k, v in self.field.parameters().items()}}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_cloud(self.cloud, out / "cloud.g4dc")
        save_field(self.field, out / "field.g4df")

    @classmethod
    def load(cls, model_dir) -> "SceneModel":
        model_dir = Path(model_dir)
        field = load_field(model_dir / "field.g4df")
        return cls(cloud=load_cloud(model_dir / "cloud.g4dc"), field=field,
                   bounds=field.bounds)


@dataclass
class TrainConfig:
    iterations: int = 1500
    coarse_iterations: int = 300
    batch: int = 2
    lambda_tv: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    learning_rates: dict = dc_field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    holdout_camera: int | None = None    # None: hold out the highest camera id
    use_holdout: bool = True             # False: train on every camera
    eval_interval: int = 100
    render_settings: rn.RenderSettings = dc_field(default_factory=rn.RenderSettings)

    def __post_init__(self):
        if self.coarse_iterations > self.iterations:
            raise ValueError(
                f"TrainConfig: coarse_iterations ({self.coarse_iterations}) must not "
                f"exceed iterations ({self.iterations})"
            )
        if self.lambda_tv < 0:
            raise ValueError("TrainConfig: lambda_tv must be >= 0")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update; raises on non-finite gradients."""
    if param.shape != grad.shape:
        raise ValueError(f"adam_step: param shape {param.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("adam_step: non-finite gradient")
    state.step += 1
    # In-place moment updates; the moments can be large (feature grids).
    np.multiply(state.m, beta1, out=state.m)
    state.m += (1.0 - beta1) * grad
    np.multiply(state.v, beta2, out=state.v)
    tmp = grad * grad
    tmp *= 1.0 - beta2
    state.v += tmp
    np.divide(state.v, 1.0 - beta2**state.step, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += eps
    np.divide(state.m, tmp, out=tmp)
    tmp *= lr / (1.0 - beta1**state.step)
    param -= tmp


class Adam:
    """Per-group Adam over named Tensors. A non-finite gradient anywhere
    rejects the whole step (params untouched) and bumps `rejected_steps`."""

    def __init__(self, groups: list[tuple[str, list[Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[int, AdamState] = {}
        self.rejected_steps = 0

    def _params(self):
        for _name, params, lr in self.groups:
            for p in params:
                yield p, lr

    def step(self) -> bool:
        pending = [(p, lr) for p, lr in self._params() if p.grad is not None]
        for p, _lr in pending:
            if not np.all(np.isfinite(p.grad)):
                self.rejected_steps += 1
                return False
        for p, lr in pending:
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = AdamState.for_param(p.data)
            adam_step(p.data, p.grad, st, lr, self.beta1, self.beta2, self.eps)
        return True

    def zero_grad(self) -> None:
        for p, _lr in self._params():
            p.grad = None


def cloud_param_groups(cloud: GaussianCloud, lrs: dict, sh_lr_scale: float = 1.0):
    return [
        ("positions", [cloud.positions], lrs["positions"]),
        ("sh", [cloud.sh_coeffs], lrs["sh"] * sh_lr_scale),
        ("opacity", [cloud.opacity_logits], lrs["opacity"]),
        ("scales", [cloud.log_scales], lrs["scales"]),
        ("rotations", [cloud.rotations], lrs["rotations"]),
    ]


def field_param_groups(field: HexplaneField, lrs: dict):
    return [
        ("grids", list(field.grid_parameters().values()), lrs["grids"]),
        ("mlps", list(field.mlp_parameters().values()), lrs["mlps"]),
    ]


# ---------------------------------------------------------------------------
# Loss


def l1_loss(rendered: rn.RenderedImage, target: np.ndarray) -> Tensor:
    if rendered.rgb.shape != target.shape:
        raise ValueError(
            f"l1_loss: rendered {rendered.rgb.shape} vs target {target.shape}"
        )
    return ad.tmean(ad.absolute(ad.sub(rendered.rgb, Tensor(target))))


def loss_4dgs(
    rendered: rn.RenderedImage, target: np.ndarray, field: HexplaneField, lambda_tv: float
) -> Tensor:
    """Mean absolute pixel difference plus weighted grid total variation."""
    total = l1_loss(rendered, target)
    if lambda_tv != 0.0:
        total = ad.add(total, ad.mul(hx.tv_loss(field), lambda_tv))
    return total


# ---------------------------------------------------------------------------
# Training loop


class _Snapshot:
    def __init__(self, params: dict[str, Tensor]):
        self.buffers = {k: t.data.copy() for k, t in params.items()}

    def capture(self, params: dict[str, Tensor]) -> None:
        for k, t in params.items():
            np.copyto(self.buffers[k], t.data)

    def restore(self, params: dict[str, Tensor]) -> None:
        for k, t in params.items():
            np.copyto(t.data, self.buffers[k])


def holdout_psnr(model: SceneModel, dataset: Dataset, cam_id: int,
                 background, settings: rn.RenderSettings) -> float:
    cam = dataset.camera(cam_id)
    vals = []
    for ti in range(dataset.num_timesteps):
        t = dataset.timestep_value(ti)
        img = rn.render(hx.deformed_cloud_at(model.field, model.cloud, t), cam,
                        background, settings)
        vals.append(psnr(img.rgb.data, dataset.load_frame(cam_id, ti)))
    return float(np.mean(vals))


def train(
    dataset: Dataset,
    config: TrainConfig,
    model: SceneModel,
    metrics_path=None,
) -> tuple[SceneModel, list[dict]]:
    """Optimize the model in place; returns (model, metric rows).

    Each step draws `batch` (camera, timestep) pairs uniformly from the
    training cameras with the run RNG, renders, and applies Adam per group.
    A non-finite loss aborts, restoring the newest state that produced a
    finite loss.
    """
    if config.iterations == 0:
        return model, []
    if dataset.num_timesteps < 1 or not dataset.cameras:
        raise ValueError("train: dataset must have at least one camera and timestep")

    rng = np.random.default_rng(config.seed)
    holdout = config.holdout_camera
    if holdout is None:
        holdout = max(dataset.camera_ids)
    if config.use_holdout:
        train_cams = [c.cam_id for c in dataset.cameras if c.cam_id != holdout]
        if not train_cams:
            train_cams = list(dataset.camera_ids)
    else:
        train_cams = list(dataset.camera_ids)

    model.cloud.set_trainable(True)
    cloud_opt = Adam(cloud_param_groups(model.cloud, config.learning_rates))
    field_opt = Adam(field_param_groups(model.field, config.learning_rates))

    params = model.parameters()
    good = _Snapshot(params)
    rows: list[dict] = []

    writer = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

    try:
        for step in range(config.iterations):
            coarse = step < config.coarse_iterations
            model.field.set_trainable(not coarse)

            cam_picks = rng.integers(0, len(train_cams), size=config.batch)
            t_picks = rng.integers(0, dataset.num_timesteps, size=config.batch)

            per_image = []
            for ci, ti in zip(cam_picks, t_picks):
                cam_id = train_cams[int(ci)]
                cam = dataset.camera(cam_id)
                t = dataset.timestep_value(int(ti))
                cloud_t = (
                    model.cloud
                    if coarse
                    else hx.deformed_cloud_at(model.field, model.cloud, t)
                )
                img = rn.render(cloud_t, cam, config.background, config.render_settings)
                per_image.append(l1_loss(img, dataset.load_frame(cam_id, int(ti))))

            l1_mean = per_image[0]
            for term in per_image[1:]:
                l1_mean = ad.add(l1_mean, term)
            l1_mean = ad.mul(l1_mean, 1.0 / len(per_image))
            tv = hx.tv_loss(model.field)
            loss = ad.add(l1_mean, ad.mul(tv, config.lambda_tv))

            if not np.isfinite(loss.item()):
                good.restore(params)
                raise TrainingAborted(
                    f"train: non-finite loss at step {step}; last-good state restored"
                )
            good.capture(params)

            ad.backward(loss)
            cloud_opt.step()
            if not coarse:
                field_opt.step()
            cloud_opt.zero_grad()
            field_opt.zero_grad()

            row = {
                "step": step,
                "loss": loss.item(),
                "l1": l1_mean.item(),
                "tv": tv.item(),
                "psnr_holdout": "",
            }
            is_eval_step = (
                config.eval_interval > 0
                and (step % config.eval_interval == config.eval_interval - 1
                     or step == config.iterations - 1)
            )
            if is_eval_step:
                row["psnr_holdout"] = holdout_psnr(
                    model, dataset, holdout, config.background, config.render_settings
                )
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in METRICS_HEADER])
                fh.flush()
    finally:
        model.field.set_trainable(False)
        model.cloud.set_trainable(False)
        if fh is not None:
            fh.close()
    return model, rows


def init_model(
    dataset: Dataset,
    num_points: int = 192,
    sh_degree: int = 1,
    init_from_gt: bool = True,
    init_jitter: float = 0.05,
    field_channels: int = 32,
    field_base_res: int = 64,
    field_time_res: int = 32,
    field_hidden: int = 64,
    seed: int = 0,
) -> SceneModel:
    """Fresh model over the dataset bounds.

    Positions come from the scene's ground-truth point set when available
    (jittered copies), else uniform samples in the bbox. Appearance starts
    neutral: mid-gray color, low opacity, small isotropic scales.
    """
    rng = np.random.default_rng(seed)
    bounds = dataset.bounds
    gt_path = Path(dataset.root) / "gt_model" / "cloud.g4dc"
    if init_from_gt and gt_path.exists():
        base = load_cloud(gt_path).positions.data
        picks = rng.integers(0, base.shape[0], size=num_points)
        positions = base[picks] + rng.normal(scale=init_jitter, size=(num_points, 3))
        positions = np.clip(positions, bounds.bbox_min, bounds.bbox_max)
    else:
        positions = rng.uniform(bounds.bbox_min, bounds.bbox_max, size=(num_points, 3))

    k = (sh_degree + 1) ** 2
    cloud = GaussianCloud(
        positions=Tensor(positions),
        log_scales=Tensor(np.full((num_points, 3), np.log(0.12))),
        rotations=Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (num_points, 1))),
        opacity_logits=Tensor(np.zeros((num_points, 1))),
        sh_coeffs=Tensor(np.zeros((num_points, k, 3))),
        sh_degree=sh_degree,
    )
    field = HexplaneField.create(
        bounds, channels=field_channels, base_res=field_base_res,
        time_res=field_time_res, hidden=field_hidden, seed=seed,
    )
    return SceneModel(cloud=cloud, field=field, bounds=bounds)
