"""Figure rendering for the report paths (training curves, eval summaries)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": None})  # keep PNG bytes reproducible


def write_loss_figure(rows: list[dict], path) -> None:
    """Loss / L1 / TV curves with held-out PSNR markers on a twin axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss"] for r in rows], label="loss", lw=1.2)
    ax.plot(steps, [r["l1"] for r in rows], label="l1", lw=0.9, alpha=0.8)
    ax.plot(steps, [r["tv"] for r in rows], label="tv", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    eval_pts = [(r["step"], r["psnr_holdout"]) for r in rows if r["psnr_holdout"] != ""]
    if eval_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*eval_pts), "o--", color="tab:red", ms=4, label="holdout PSNR")
        ax2.set_ylabel("PSNR (dB)", color="tab:red")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def write_stage_figure(rows: list[dict], ykey: str, ylabel: str, path) -> None:
    """Single-series curve for stage logs (stage-1 L1, stage-2 residual RMS)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = [(r["step"], r[ykey]) for r in rows if not r.get("skipped", False)]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    if pts:
        ax.plot(*zip(*pts), lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def write_eval_figure(rows: list[dict], path) -> None:
    """Per-timestep PSNR / SSIM, one light line per camera plus the mean."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cams = sorted({r["camera"] for r in rows})
    ts = sorted({r["t"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for metric, ax in zip(("psnr", "ssim"), axes):
        for cam in cams:
            series = [(r["t"], r[metric]) for r in rows if r["camera"] == cam]
            series.sort()
            ax.plot(*zip(*series), color="gray", alpha=0.35, lw=0.8)
        means = []
        for t in ts:
            vals = [r[metric] for r in rows if r["t"] == t]
            means.append(sum(vals) / len(vals))
        ax.plot(ts, means, color="tab:blue", lw=1.6, label="mean")
        ax.set_xlabel("timestep index")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
