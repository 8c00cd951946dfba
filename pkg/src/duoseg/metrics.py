"""Evaluation metrics: Dice, Jaccard, 95% Hausdorff, average surface distance.

Distances are in voxel units (isotropic spacing 1.0); surface voxels are
foreground voxels with at least one of their 6 face-neighbors background
or lying on the array edge. 95HD and ASD use the pooled symmetric distance
list (both directed sets concatenated).
"""

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError

UNDEFINED = float("nan")


@dataclass
class CaseMetrics:
    dice: float
    jaccard: float
    hd95: float  # NaN when either surface is empty
    asd: float
    case_id: str = ""

    @property
    def surface_defined(self):
        return not math.isnan(self.hd95)


def _check_shapes(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred_mask, gt_mask):
    pred, gt = _check_shapes(pred_mask, gt_mask)
    p, g = pred.sum(), gt.sum()
    if p + g == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / (p + g)


def jaccard(pred_mask, gt_mask):
    pred, gt = _check_shapes(pred_mask, gt_mask)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return np.logical_and(pred, gt).sum() / union


def surface_voxels(mask):
    """Foreground voxels with a background face-neighbor or on the edge."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for ax in range(mask.ndim):
        lo = [slice(1, -1)] * mask.ndim
        hi = [slice(1, -1)] * mask.ndim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    boundary = mask & ~interior
    return np.argwhere(boundary)


def surface_distances(pred_mask, gt_mask):
    """(hd95, asd) over the pooled symmetric surface distances; NaN pair
    when either surface is empty."""
    pred, gt = _check_shapes(pred_mask, gt_mask)
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    if len(sp) == 0 or len(sg) == 0:
        return UNDEFINED, UNDEFINED
    d_pg = cKDTree(sg).query(sp)[0]
    d_gp = cKDTree(sp).query(sg)[0]
    pooled = np.concatenate([d_pg, d_gp])
    hd95 = float(np.percentile(pooled, 95))  # linear interpolation
    asd = float(pooled.mean())
    return hd95, asd


def evaluate_case(prob, gt_mask, case_id=""):
    """Argmax thresholding (ties break to background) then all four metrics."""
    values = prob.values if hasattr(prob, "values") else prob
    values = np.asarray(values)
    if values.shape[1:] != np.asarray(gt_mask).shape:
        raise ShapeError(
            f"probability shape {values.shape} does not match mask "
            f"{np.asarray(gt_mask).shape}"
        )
    pred_mask = values.argmax(axis=0) > 0
    gt = np.asarray(gt_mask) > 0
    hd95, asd = surface_distances(pred_mask, gt)
    return CaseMetrics(dice=float(dice(pred_mask, gt)),
                       jaccard=float(jaccard(pred_mask, gt)),
                       hd95=hd95, asd=asd, case_id=case_id)


def aggregate(cases):
    """Mean and std per metric; surface metrics skip undefined cases."""
    out = {}
    for name in ("dice", "jaccard", "hd95", "asd"):
        vals = [getattr(c, name) for c in cases]
        vals = [v for v in vals if not math.isnan(v)]
        out[name] = {
            "mean": float(np.mean(vals)) if vals else UNDEFINED,
            "std": float(np.std(vals)) if vals else UNDEFINED,
            "n": len(vals),
        }
    out["undefined_surface_cases"] = sum(1 for c in cases if not c.surface_defined)
    return out


def write_report(cases, out_dir, stem="metrics"):
    """Per-case + aggregate report as JSON and flat CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(cases)
    report = {"cases": [asdict(c) for c in cases], "aggregate": agg}
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report, indent=2))
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "dice", "jaccard", "hd95", "asd"])
        for c in cases:
            writer.writerow([c.case_id, c.dice, c.jaccard, c.hd95, c.asd])
        writer.writerow(["mean", agg["dice"]["mean"], agg["jaccard"]["mean"],
                         agg["hd95"]["mean"], agg["asd"]["mean"]])
        writer.writerow(["std", agg["dice"]["std"], agg["jaccard"]["std"],
                         agg["hd95"]["std"], agg["asd"]["std"]])
    return json_path, csv_path
