"""Operator-facing command surface: synth -> train -> edit -> refine -> render -> eval.

Every command resolves its configuration (defaults <- config file <- --set
overrides), writes its artifact plus a `run.json` provenance record
{command, flags, resolved config, seed, input hashes, wall time}, and never
mutates its inputs. Exit codes: 0 success, 2 validation error, 3 runtime
failure (diverged training, guidance backend down, ...).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import editor as ed
from . import hexplane as hx
from . import metrics as mx
from . import renderer as rn
from . import reports
from . import scene_io as sio
from . import sds
from . import trainer as tr
from .errors import GuidanceError, ValidationError
from .gaussians import load_cloud, look_at_camera
from .trainer import SceneModel, TrainingAborted


# ---------------------------------------------------------------------------
# Provenance


def hash_path(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    if path.is_dir():
        digest = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(sub.relative_to(path)).encode())
            digest.update(hashlib.sha256(sub.read_bytes()).digest())
        return digest.hexdigest()
    raise ValidationError(f"input path does not exist: {path}")


def write_run_record(
    record_path: Path, command: str, flags: dict, cfg: dict,
    inputs: dict, started: float,
) -> None:
    record = {
        "command": command,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
        "resolved_config": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()
        },
        "seed": cfg.get("seed"),
        "input_hashes": {name: hash_path(Path(p)) for name, p in inputs.items()},
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Shared construction helpers


def _overrides_from(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve(args, config_attr: str = "config") -> dict:
    return cfgmod.resolve_config(getattr(args, config_attr, None), _overrides_from(args))


def render_settings_from(cfg: dict) -> rn.RenderSettings:
    return rn.RenderSettings(
        near_plane=cfg["near_plane"], truncation_sigma=cfg["truncation_sigma"]
    )


def learning_rates_from(cfg: dict, scale: float = 1.0) -> dict:
    return {
        "positions": cfg["lr_positions"] * scale,
        "sh": cfg["lr_sh"] * scale,
        "opacity": cfg["lr_opacity"] * scale,
        "scales": cfg["lr_scales"] * scale,
        "rotations": cfg["lr_rotations"] * scale,
        "grids": cfg["lr_grids"] * scale,
        "mlps": cfg["lr_mlps"] * scale,
    }


def load_model_dir(model_dir: Path) -> SceneModel:
    model_dir = Path(model_dir)
    field_path = model_dir / "field.g4df"
    cloud_path = model_dir / "cloud.g4dc"
    if not cloud_path.exists():
        raise ValidationError(f"model directory has no cloud checkpoint: {cloud_path}")
    if field_path.exists():
        return SceneModel.load(model_dir)
    # A bare cloud (e.g. a synthetic ground-truth sidecar) renders as a
    # static scene through an identity deformation field.
    cloud = load_cloud(cloud_path)
    lo = cloud.positions.data.min(axis=0) - 1.0
    hi = cloud.positions.data.max(axis=0) + 1.0
    bounds = hx.SceneBounds(lo, hi)
    field = hx.HexplaneField.create(bounds, channels=2, base_res=2, time_res=2,
                                    hidden=4, seed=0)
    return SceneModel(cloud=cloud, field=field, bounds=bounds)


def _write_stage_csv(rows: list[dict], keys: tuple[str, ...], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([row.get(k, "") for k in keys])


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args, config_attr="spec")
    spec = cfgmod.synth_spec_from_config(cfg)
    out = Path(args.out)
    sio.synth_generate(spec, out)
    inputs = {"spec": args.spec} if args.spec else {}
    write_run_record(out / "run.json", "synth",
                     {"spec": args.spec, "out": str(out)}, cfg, inputs, started)
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    dataset = sio.load_dataset(args.data)
    out = Path(args.out)
    model = tr.init_model(
        dataset,
        num_points=cfg["model_points"],
        sh_degree=cfg["model_sh_degree"],
        init_from_gt=cfg["model_init_from_gt"],
        init_jitter=cfg["model_init_jitter"],
        field_channels=cfg["field_channels"],
        field_base_res=cfg["field_base_res"],
        field_time_res=cfg["field_time_res"],
        field_hidden=cfg["field_hidden"],
        seed=cfg["seed"],
    )
    train_cfg = tr.TrainConfig(
        iterations=cfg["train_iterations"],
        coarse_iterations=cfg["train_coarse_iterations"],
        batch=cfg["train_batch"],
        lambda_tv=cfg["lambda_tv"],
        background=cfg["background"],
        seed=cfg["seed"],
        learning_rates=learning_rates_from(cfg),
        holdout_camera=None if cfg["holdout_camera"] < 0 else cfg["holdout_camera"],
        use_holdout=cfg["holdout_camera"] != -2,
        eval_interval=cfg["train_eval_interval"],
        render_settings=render_settings_from(cfg),
    )
    out.mkdir(parents=True, exist_ok=True)
    try:
        _model, rows = tr.train(dataset, train_cfg, model, metrics_path=out / "metrics.csv")
    finally:
        model.save(out)
    if rows:
        reports.write_loss_figure(rows, out / "figures" / "loss_curve.png")
    write_run_record(out / "run.json", "train",
                     {"data": str(args.data), "out": str(out)}, cfg,
                     {"data": args.data}, started)
    return 0


def cmd_edit(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    dataset = sio.load_dataset(args.data)
    model = load_model_dir(Path(args.model))
    out = Path(args.out)

    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise ValidationError(f"--param expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            params[key.strip()] = value.strip()

    if args.operator.startswith("http://") or args.operator.startswith("https://"):
        operator = ed.EditOperator("external", params=params, seed=cfg["seed"],
                                   url=args.operator)
    else:
        operator = ed.EditOperator(args.operator, params=params, seed=cfg["seed"])

    views = ed.collect_first_timestep(dataset)
    edited = ed.apply_operator(operator, views, args.instruction,
                               s_image=cfg["s_image"], s_text=cfg["s_text"])
    out.mkdir(parents=True, exist_ok=True)
    for cam, img in edited.views:
        sio.save_png(img, out / "edited_views" / f"cam_{cam.cam_id}.png")
    try:
        _model, rows = ed.fit_canonical(
            model, edited,
            iters=cfg["edit_iterations"],
            learning_rates=learning_rates_from(cfg),
            sh_lr_scale=cfg["edit_sh_lr_scale"],
            batch=cfg["edit_batch"],
            seed=cfg["seed"],
            background=cfg["background"],
            settings=render_settings_from(cfg),
        )
    finally:
        model.save(out)
    (out / "edit.json").write_text(json.dumps({
        "operator": operator.kind,
        "params": operator.params,
        "url": operator.url,
        "instruction": args.instruction,
        "seed": operator.seed,
    }, indent=2, sort_keys=True) + "\n")
    _write_stage_csv(rows, ("step", "l1"), out / "stage1_log.csv")
    if rows:
        reports.write_stage_figure(rows, "l1", "stage-1 L1", out / "figures" / "stage1_l1.png")
    write_run_record(out / "run.json", "edit",
                     {"model": str(args.model), "data": str(args.data),
                      "operator": args.operator, "instruction": args.instruction,
                      "param": list(args.param or []), "out": str(out)},
                     cfg, {"model": args.model, "data": args.data}, started)
    return 0


def _guidance_from(args, cfg, model_dir: Path):
    if args.guidance == "oracle":
        edit_meta_path = model_dir / "edit.json"
        if not edit_meta_path.exists():
            raise ValidationError(
                f"--guidance oracle needs {edit_meta_path} (produced by the edit command) "
                "to recover the edit operator"
            )
        meta = json.loads(edit_meta_path.read_text())
        if meta["operator"] == "external":
            raise ValidationError(
                "--guidance oracle cannot reproduce an external edit; pass the bridge URL"
            )
        operator = ed.EditOperator(meta["operator"], params=meta.get("params", {}),
                                   seed=meta.get("seed", 0))
        schedule = sds.DiffusionSchedule(t_min=cfg["t_min"], t_max=cfg["t_max"])
        return sds.OracleGuidance(operator, schedule), meta.get("instruction", "")
    if args.guidance.startswith("http://") or args.guidance.startswith("https://"):
        instruction = ""
        edit_meta_path = model_dir / "edit.json"
        if edit_meta_path.exists():
            instruction = json.loads(edit_meta_path.read_text()).get("instruction", "")
        return sds.RemoteGuidance(args.guidance, timeout=cfg["guidance_timeout"]), instruction
    raise ValidationError(f"--guidance must be 'oracle' or a URL, got '{args.guidance}'")


def cmd_refine(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    dataset = sio.load_dataset(args.data)
    model_dir = Path(args.model)
    model = load_model_dir(model_dir)
    out = Path(args.out)
    guidance, instruction = _guidance_from(args, cfg, model_dir)
    schedule = sds.DiffusionSchedule(t_min=cfg["t_min"], t_max=cfg["t_max"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        _model, rows = sds.refine(
            model, dataset, guidance,
            scales=sds.CFGScales(cfg["s_image"], cfg["s_text"]),
            iters=cfg["refine_iterations"],
            batch_size=cfg["refine_batch"],
            learning_rates=learning_rates_from(cfg, scale=cfg["refine_lr_scale"]),
            seed=cfg["seed"],
            schedule=schedule,
            background=cfg["background"],
            settings=render_settings_from(cfg),
            instruction=instruction,
            t_per_image=cfg["refine_t_per_image"],
        )
    finally:
        model.save(out)
    if (model_dir / "edit.json").exists():
        (out / "edit.json").write_text((model_dir / "edit.json").read_text())
    _write_stage_csv(rows, ("step", "residual_rms", "skipped"), out / "refine_log.csv")
    if rows:
        reports.write_stage_figure(rows, "residual_rms", "residual RMS",
                                   out / "figures" / "refine_residual.png")
    write_run_record(out / "run.json", "refine",
                     {"model": str(args.model), "data": str(args.data),
                      "guidance": args.guidance, "out": str(out)},
                     cfg, {"model": args.model, "data": args.data}, started)
    return 0


def cmd_render(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    dataset = sio.load_dataset(args.data)
    model = load_model_dir(Path(args.model))
    settings = render_settings_from(cfg)
    if (args.t is None) == (args.orbit is None):
        raise ValidationError("render: pass exactly one of --t or --orbit")

    if args.t is not None:
        if args.camera is None:
            raise ValidationError("render: --t requires --camera")
        cam = dataset.camera(args.camera)
        cloud_t = hx.deformed_cloud_at(model.field, model.cloud, float(args.t))
        img = rn.render(cloud_t, cam, cfg["background"], settings)
        out = Path(args.out)
        sio.save_png(img.rgb.data, out)
        write_run_record(out.with_suffix(".run.json"), "render",
                         {"model": str(args.model), "data": str(args.data),
                          "camera": args.camera, "t": args.t, "out": str(out)},
                         cfg, {"model": args.model, "data": args.data}, started)
        return 0

    frames = int(args.orbit)
    if frames < 1:
        raise ValidationError("render: --orbit needs at least one frame")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    centers = np.stack([c.center for c in dataset.cameras])
    radius = float(np.mean(np.linalg.norm(centers[:, :2], axis=1)))
    height = float(np.mean(centers[:, 2]))
    proto = dataset.cameras[0]
    for i in range(frames):
        ang = 2.0 * np.pi * i / frames
        t = 0.0 if frames == 1 else i / (frames - 1)
        cam = look_at_camera(
            (radius * np.cos(ang), radius * np.sin(ang), height), (0.0, 0.0, 0.0),
            fx=proto.fx, fy=proto.fy, cx=proto.cx, cy=proto.cy,
            width=proto.width, height=proto.height,
        )
        cloud_t = hx.deformed_cloud_at(model.field, model.cloud, t)
        img = rn.render(cloud_t, cam, cfg["background"], settings)
        sio.save_png(img.rgb.data, out / f"orbit_{i:04d}.png")
    write_run_record(out / "run.json", "render",
                     {"model": str(args.model), "data": str(args.data),
                      "orbit": frames, "out": str(out)},
                     cfg, {"model": args.model, "data": args.data}, started)
    return 0


def _reference_frame(ref_root: Path | None, dataset: sio.Dataset, cam_id: int, ti: int):
    if ref_root is None:
        return dataset.load_frame(cam_id, ti)
    base = ref_root / "frames" if (ref_root / "frames").is_dir() else ref_root
    path = base / f"cam_{cam_id}" / f"{ti:05d}.png"
    if not path.exists():
        raise ValidationError(f"eval: missing reference frame {path}")
    return sio.load_png(path)


def cmd_eval(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    dataset = sio.load_dataset(args.data)
    model = load_model_dir(Path(args.model))
    settings = render_settings_from(cfg)
    ref_root = Path(args.ref_images) if args.ref_images else None
    rows = []
    for cam in dataset.cameras:
        for ti in range(dataset.num_timesteps):
            t = dataset.timestep_value(ti)
            cloud_t = hx.deformed_cloud_at(model.field, model.cloud, t)
            img = rn.render(cloud_t, cam, cfg["background"], settings)
            ref = _reference_frame(ref_root, dataset, cam.cam_id, ti)
            rows.append({
                "camera": cam.cam_id,
                "t": ti,
                "psnr": mx.psnr(img.rgb.data, ref),
                "ssim": mx.ssim(img.rgb.data, ref),
            })
    out = Path(args.out)
    _write_stage_csv(rows, ("camera", "t", "psnr", "ssim"), out)
    reports.write_eval_figure(rows, out.parent / "figures" / "eval.png")
    inputs = {"model": args.model, "data": args.data}
    if args.ref_images:
        inputs["ref_images"] = args.ref_images
    write_run_record(out.with_suffix(".run.json"), "eval",
                     {"model": str(args.model), "data": str(args.data),
                      "ref_images": args.ref_images, "out": str(out)},
                     cfg, inputs, started)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splat4d",
        description="Desk-scale 4D Gaussian splatting: synthesize, train, edit, refine, render, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic multiview video dataset")
    p.add_argument("--spec", help="synthesis parameters (key = value file)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="fit a scene model to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("edit", help="edit first-timestep views and refit the cloud")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--operator", required=True,
                   help="builtin kind (grayscale, sepia, hue_rotate, posterize, vignette) or bridge URL")
    p.add_argument("--instruction", required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="operator parameter (repeatable)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_edit)

    p = sub.add_parser("refine", help="score-distillation temporal refinement")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--guidance", required=True, help="'oracle' or a bridge URL")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("render", help="render one view or an orbit sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the camera rig")
    p.add_argument("--camera", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--orbit", type=int, help="number of orbit frames")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of model renders against references")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ref-images", dest="ref_images")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output CSV path")
    common(p)
    p.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, GuidanceError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
