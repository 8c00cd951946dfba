"""Static figure emission: loss curves, ablation metric bars, and mid-slice
prediction/ground-truth overlay panels."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigurationError

METRICS = ("dice", "jaccard", "hd95", "asd")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curves(run_dir, out_path=None):
    run_dir = Path(run_dir)
    loss_path = run_dir / "losses.csv"
    if not loss_path.exists():
        raise ConfigurationError(f"no losses.csv in {run_dir}")
    rows = _read_csv(loss_path)
    it = [int(r["iteration"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for ax, sn in zip(axes, ("sn1", "sn2")):
        for term in ("sup", "fix", "dyn", "total"):
            ax.plot(it, [float(r[f"{sn}_{term}"]) for r in rows], label=term, lw=0.8)
        ax.set_title(f"subnet {sn[-1]}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else run_dir / "loss_curves.png"
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation_bars(table_path, out_path=None):
    table_path = Path(table_path)
    if not table_path.exists():
        raise ConfigurationError(f"no ablation table at {table_path}")
    rows = _read_csv(table_path)
    variants = [r["variant"] for r in rows]
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.5))
    x = np.arange(len(variants))
    for ax, metric in zip(axes, METRICS):
        vals = [float(r[metric]) for r in rows]
        ax.bar(x, vals, color="steelblue")
        ax.set_xticks(x)
        ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else table_path.with_suffix(".png")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_case_overlay(image, gt_mask, pred_mask, out_path, case_id=""):
    """Three mid-slice panels: raw image, GT contour, prediction contour."""
    z = image.shape[2] // 2
    img, gt, pred = image[:, :, z], gt_mask[:, :, z], pred_mask[:, :, z]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    titles = ("image", "ground truth", "prediction")
    overlays = (None, gt, pred)
    for ax, title, overlay in zip(axes, titles, overlays):
        ax.imshow(img.T, cmap="gray", origin="lower")
        if overlay is not None and overlay.any():
            ax.contour(overlay.T, levels=[0.5], colors="r", linewidths=1.0)
        ax.set_title(f"{title} {case_id}".strip(), fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_run(run_dir, out_dir=None):
    """Everything a completed run supports: loss curves, plus ablation bars
    if a table is present."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if (run_dir / "losses.csv").exists():
        written.append(plot_loss_curves(run_dir, out_dir / "loss_curves.png"))
    if (run_dir / "ablation.csv").exists():
        written.append(plot_ablation_bars(run_dir / "ablation.csv",
                                          out_dir / "ablation_metrics.png"))
    if not written:
        raise ConfigurationError(f"nothing to plot in {run_dir}")
    return written
