"""Stage 2: score-distillation refinement of the edited canonical cloud.

Each iteration renders a batch at random (camera, timestep) pairs, obtains a
noise-prediction residual from a guidance source, and backpropagates
`residual * d(render)/d(cloud)` into the cloud parameters only; the
deformation field never receives gradient. The residual itself is treated as
a constant: no gradient flows through the guidance output.

Guidance sources come in two forms:
  * noise predictors (`predict_noise`) evaluated three times per batch
    (unconditional / image-conditioned / fully conditioned) and combined by
    classifier-free guidance -- the in-process analytic oracle uses this
    path, so the CFG composition is exercised literally;
  * residual sources (`residuals`) that return the composed image-space
    residual directly -- the HTTP bridge uses this path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bridge_client as bc
from . import hexplane as hx
from . import renderer as rn
from . import trainer as tr
from .autodiff import Tensor
from .editor import EditOperator, apply_image
from .errors import GuidanceError
from .gaussians import Camera
from .scene_io import Dataset
from .trainer import SceneModel, TrainingAborted


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cosine cumulative-signal schedule: alpha_bar(t) = cos^2(pi t / 2)."""

    t_min: float = 0.02
    t_max: float = 0.98

    def alpha_bar(self, t: float) -> float:
        if not (self.t_min <= t <= self.t_max):
            raise ValueError(
                f"alpha_bar: t={t} outside sampling range [{self.t_min}, {self.t_max}]"
            )
        return math.cos(math.pi * t / 2.0) ** 2


def alpha_bar(schedule: DiffusionSchedule, t: float) -> float:
    return schedule.alpha_bar(t)


@dataclass(frozen=True)
class CFGScales:
    s_image: float = 1.2
    s_text: float = 8.5

    def __post_init__(self):
        if not (math.isfinite(self.s_image) and math.isfinite(self.s_text)):
            raise ValueError("CFGScales: scales must be finite")


def add_noise(x: np.ndarray, eps: np.ndarray, t: float,
              schedule: DiffusionSchedule = DiffusionSchedule()) -> np.ndarray:
    """Forward diffusion: sqrt(a) x + sqrt(1-a) eps at cumulative signal a."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"add_noise: x shape {x.shape} vs noise shape {eps.shape}")
    a = schedule.alpha_bar(t)
    return math.sqrt(a) * x + math.sqrt(1.0 - a) * eps


def cfg_compose(e_uncond: np.ndarray, e_img: np.ndarray, e_full: np.ndarray,
                scales: CFGScales) -> np.ndarray:
    """e_uncond + s_I (e_img - e_uncond) + s_T (e_full - e_img), elementwise.

    With both scales exactly 1 the sum telescopes to e_full; that case is
    returned directly so the identity holds bit-for-bit.
    """
    if e_uncond.shape != e_img.shape or e_img.shape != e_full.shape:
        raise ValueError(
            f"cfg_compose: shapes differ: {e_uncond.shape}, {e_img.shape}, {e_full.shape}"
        )
    if scales.s_image == 1.0 and scales.s_text == 1.0:
        return e_full.copy()
    return (
        e_uncond
        + scales.s_image * (e_img - e_uncond)
        + scales.s_text * (e_full - e_img)
    )


# ---------------------------------------------------------------------------
# Guidance sources


class GuidanceModel:
    """Noise predictor with droppable image/text conditioning."""

    def predict_noise(
        self,
        noisy: np.ndarray,        # (B, H, W, 3)
        originals: np.ndarray,    # (B, H, W, 3)
        instruction: str,
        t: float,
        drop_image: bool,
        drop_text: bool,
        seed: int,
    ) -> np.ndarray:
        raise NotImplementedError


class AnalyticDenoiser(GuidanceModel):
    """Optimal denoiser for a point-mass image distribution at `target`:
    eps_hat(x_t, t) = (x_t - sqrt(a) target) / sqrt(1 - a).

    Conditioning flags are ignored; this is the engine's test oracle, for
    which eps_hat - eps == sqrt(a / (1 - a)) (x - target) holds exactly.
    """

    def __init__(self, target: np.ndarray, schedule: DiffusionSchedule = DiffusionSchedule()):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule

    def predict_noise(self, noisy, originals, instruction, t, drop_image, drop_text, seed):
        a = self.schedule.alpha_bar(t)
        target = self.target
        if noisy.ndim == target.ndim + 1:
            target = target[None, ...]
        return (noisy - math.sqrt(a) * target) / math.sqrt(1.0 - a)


def analytic_denoiser(target: np.ndarray,
                      schedule: DiffusionSchedule = DiffusionSchedule()) -> AnalyticDenoiser:
    return AnalyticDenoiser(target, schedule)


class OracleGuidance(GuidanceModel):
    """Analytic denoiser whose per-image targets are the operator-edited
    originals; used as the desk-scale stand-in for a diffusion editor."""

    def __init__(self, operator: EditOperator, schedule: DiffusionSchedule = DiffusionSchedule()):
        self.operator = operator
        self.schedule = schedule

    def predict_noise(self, noisy, originals, instruction, t, drop_image, drop_text, seed):
        a = self.schedule.alpha_bar(t)
        targets = np.stack([apply_image(self.operator, img) for img in originals])
        return (noisy - math.sqrt(a) * targets) / math.sqrt(1.0 - a)


class RemoteGuidance:
    """Residual source over the wire protocol; returns the composed
    image-space (eps_hat - eps)-equivalent gradients directly."""

    def __init__(self, url: str, timeout: float = bc.DEFAULT_TIMEOUT):
        self.url = url
        self.timeout = timeout

    def residuals(self, renders, originals, instruction, scales: CFGScales,
                  t: float, seed: int) -> list[np.ndarray]:
        return bc.post_guidance(
            self.url, renders, originals, instruction,
            scales.s_image, scales.s_text, t, seed, self.timeout,
        )


# ---------------------------------------------------------------------------
# Refinement batches and steps


@dataclass
class RefineBatch:
    cams: list[Camera]
    cam_ids: list[int]
    timesteps: list[float]            # scene time per item, in [0, 1]
    renders: list[rn.RenderedImage]   # differentiable renders of the model
    originals: list[np.ndarray]       # dataset frames for the same pairs
    noises: np.ndarray                # (B, H, W, 3)
    t_diff: float                     # shared diffusion timestep
    instruction: str = ""
    seed: int = 0

    def __post_init__(self):
        b = len(self.cams)
        sizes = (len(self.cam_ids), len(self.timesteps), len(self.renders),
                 len(self.originals), self.noises.shape[0])
        if any(s != b for s in sizes):
            raise ValueError(f"RefineBatch: per-item lists must share length, got {sizes}")


def _as_constant(arr) -> np.ndarray:
    """Guidance outputs are constants: strip any gradient tracking."""
    if isinstance(arr, Tensor):
        return arr.data.copy()
    return np.asarray(arr, dtype=np.float64)


def sds_step(
    model: SceneModel,
    batch: RefineBatch,
    guidance,
    scales: CFGScales,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    weight_fn=None,
    normalizer: int | None = None,
) -> dict:
    """Accumulate the distillation gradient on the cloud parameters.

    Residuals are composed per batch item, scaled by weight_fn(t)/B, and
    pushed through d(render)/d(cloud) via a proxy inner-product loss. The
    field is frozen by contract; its parameters receive no gradient.
    """
    b = len(batch.renders)
    renders_np = np.stack([r.rgb.data for r in batch.renders])
    if hasattr(guidance, "predict_noise"):
        noisy = add_noise(renders_np, batch.noises, batch.t_diff, schedule)
        e_uncond = _as_constant(guidance.predict_noise(
            noisy, np.stack(batch.originals), batch.instruction, batch.t_diff,
            drop_image=True, drop_text=True, seed=batch.seed))
        e_img = _as_constant(guidance.predict_noise(
            noisy, np.stack(batch.originals), batch.instruction, batch.t_diff,
            drop_image=False, drop_text=True, seed=batch.seed))
        e_full = _as_constant(guidance.predict_noise(
            noisy, np.stack(batch.originals), batch.instruction, batch.t_diff,
            drop_image=False, drop_text=False, seed=batch.seed))
        eps_hat = cfg_compose(e_uncond, e_img, e_full, scales)
        residual = eps_hat - batch.noises
    elif hasattr(guidance, "residuals"):
        grads = guidance.residuals(
            [renders_np[i] for i in range(b)], batch.originals, batch.instruction,
            scales, batch.t_diff, batch.seed,
        )
        residual = np.stack([_as_constant(g) for g in grads])
    else:
        raise TypeError(f"sds_step: {type(guidance).__name__} is not a guidance source")

    weight = 1.0 if weight_fn is None else float(weight_fn(batch.t_diff))
    coef = weight / (normalizer if normalizer is not None else b)
    proxy = None
    for i, render in enumerate(batch.renders):
        term = ad.tsum(ad.mul(render.rgb, Tensor(residual[i] * coef)))
        proxy = term if proxy is None else ad.add(proxy, term)
    ad.backward(proxy)
    return {
        "residual_rms": float(np.sqrt(np.mean(residual**2))),
        "weight": weight,
    }


def refine(
    model: SceneModel,
    dataset: Dataset,
    guidance,
    scales: CFGScales = CFGScales(),
    iters: int = 800,
    batch_size: int = 4,
    learning_rates: dict | None = None,
    seed: int = 0,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    background=(0.0, 0.0, 0.0),
    settings: rn.RenderSettings = rn.RenderSettings(),
    instruction: str = "",
    weight_fn=None,
    t_per_image: bool = False,
) -> tuple[SceneModel, list[dict]]:
    """Run `iters` distillation steps with Adam on the cloud only.

    Cameras are sampled uniformly from the full rig, scene timesteps
    uniformly from the dataset's discrete set, and the diffusion timestep
    uniformly from the schedule's range (one per batch by default, one per
    image with `t_per_image`). A guidance failure skips the step and is
    logged, never silently zero-filled.
    """
    if iters < 0:
        raise ValueError(f"refine: iters must be >= 0, got {iters}")
    lrs = dict(tr.DEFAULT_LEARNING_RATES)
    if learning_rates:
        lrs.update(learning_rates)
    rng = np.random.default_rng(seed)
    model.field.set_trainable(False)
    model.cloud.set_trainable(True)
    opt = tr.Adam(tr.cloud_param_groups(model.cloud, lrs))
    rows: list[dict] = []
    cam_ids = list(dataset.camera_ids)
    try:
        for step in range(iters):
            picks = rng.integers(0, len(cam_ids), size=batch_size)
            t_picks = rng.integers(0, dataset.num_timesteps, size=batch_size)
            cams = [dataset.camera(cam_ids[int(i)]) for i in picks]
            size_hw = (cams[0].height, cams[0].width)
            noises = rng.standard_normal((batch_size, *size_hw, 3))
            if t_per_image:
                t_diffs = rng.uniform(schedule.t_min, schedule.t_max, size=batch_size)
            else:
                t_diffs = np.full(batch_size, rng.uniform(schedule.t_min, schedule.t_max))

            renders, originals, timesteps = [], [], []
            for ci, ti in zip(picks, t_picks):
                cam = dataset.camera(cam_ids[int(ci)])
                t = dataset.timestep_value(int(ti))
                timesteps.append(t)
                cloud_t = hx.deformed_cloud_at(model.field, model.cloud, t)
                renders.append(rn.render(cloud_t, cam, background, settings))
                originals.append(dataset.load_frame(cam_ids[int(ci)], int(ti)))

            row = {"step": step, "skipped": False, "residual_rms": float("nan")}
            try:
                groups = []
                if t_per_image:
                    # One sub-batch per distinct diffusion timestep.
                    for i in range(batch_size):
                        groups.append(([i], float(t_diffs[i])))
                else:
                    groups.append((list(range(batch_size)), float(t_diffs[0])))
                rms_values = []
                for idx, t_diff in groups:
                    sub = RefineBatch(
                        cams=[cams[i] for i in idx],
                        cam_ids=[cam_ids[int(picks[i])] for i in idx],
                        timesteps=[timesteps[i] for i in idx],
                        renders=[renders[i] for i in idx],
                        originals=[originals[i] for i in idx],
                        noises=noises[idx],
                        t_diff=t_diff,
                        instruction=instruction,
                        seed=seed,
                    )
                    info = sds_step(model, sub, guidance, scales, schedule, weight_fn,
                                    normalizer=batch_size)
                    rms_values.append(info["residual_rms"])
                row["residual_rms"] = float(np.mean(rms_values))
            except GuidanceError as exc:
                row["skipped"] = True
                row["error"] = str(exc)
                rows.append(row)
                opt.zero_grad()
                continue
            stepped = opt.step()
            opt.zero_grad()
            if not stepped:
                raise TrainingAborted(f"refine: non-finite gradient at step {step}")
            rows.append(row)
    finally:
        model.cloud.set_trainable(False)
    return model, rows
