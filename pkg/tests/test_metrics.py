"""Metric tests against brute-force oracles and hand-computed cases."""

import json
import math

import numpy as np
import pytest

from duoseg import metrics
from duoseg.errors import ShapeError


def oracle_overlap(pred, gt):
    """Voxel-by-voxel Dice and Jaccard."""
    tp = fp = fn = 0
    for idx in np.ndindex(pred.shape):
        p, g = bool(pred[idx]), bool(gt[idx])
        tp += p and g
        fp += p and not g
        fn += g and not p
    if tp + fp + fn == 0:
        return 1.0, 1.0
    d = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
    j = tp / (tp + fp + fn)
    return d, j


def oracle_surface(mask):
    """All foreground voxels with a non-foreground 6-neighbor or at the edge."""
    out = []
    shape = mask.shape
    for idx in np.ndindex(shape):
        if not mask[idx]:
            continue
        boundary = False
        for ax in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[ax] += step
                if n[ax] < 0 or n[ax] >= shape[ax] or not mask[tuple(n)]:
                    boundary = True
        if boundary:
            out.append(idx)
    return out


def oracle_distances(pred, gt):
    sp, sg = oracle_surface(pred), oracle_surface(gt)
    if not sp or not sg:
        return None
    def all_min(src, dst):
        return [min(math.dist(a, b) for b in dst) for a in src]
    pooled = sorted(all_min(sp, sg) + all_min(sg, sp))
    return float(np.percentile(pooled, 95)), float(np.mean(pooled))


def random_mask(rng, max_side=8):
    shape = tuple(int(v) for v in rng.integers(2, max_side + 1, size=3))
    return rng.random(shape) < rng.uniform(0.05, 0.6), shape


class TestOverlapMetrics:
    def test_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred, shape = random_mask(rng)
            gt = rng.random(shape) < rng.uniform(0.05, 0.6)
            d_ref, j_ref = oracle_overlap(pred, gt)
            assert metrics.dice(pred, gt) == pytest.approx(d_ref, abs=1e-12)
            assert metrics.jaccard(pred, gt) == pytest.approx(j_ref, abs=1e-12)

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4, 4), dtype=bool)
        assert metrics.dice(z, z) == 1.0
        assert metrics.jaccard(z, z) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert metrics.dice(a, b) == 0.0
        assert metrics.jaccard(a, b) == 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            metrics.dice(np.zeros((3, 3, 3)), np.zeros((3, 3, 4)))


class TestSurface:
    def test_oracle_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            mask, _ = random_mask(rng)
            got = {tuple(v) for v in metrics.surface_voxels(mask)}
            assert got == set(oracle_surface(mask))

    def test_solid_cube_surface_is_shell(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[1:5, 1:5, 1:5] = True
        got = {tuple(v) for v in metrics.surface_voxels(mask)}
        assert got == set(oracle_surface(mask))
        assert len(got) == 4 ** 3 - 2 ** 3

    def test_edge_voxels_are_surface(self):
        mask = np.ones((3, 3, 3), dtype=bool)
        assert len(metrics.surface_voxels(mask)) == 26


class TestDistances:
    def test_oracle_randomized(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 100:
            pred, shape = random_mask(rng)
            gt = rng.random(shape) < rng.uniform(0.05, 0.6)
            ref = oracle_distances(pred, gt)
            hd95, asd = metrics.surface_distances(pred, gt)
            if ref is None:
                assert math.isnan(hd95) and math.isnan(asd)
                continue
            assert hd95 == pytest.approx(ref[0], abs=1e-9)
            assert asd == pytest.approx(ref[1], abs=1e-9)
            checked += 1

    def test_single_voxel_offset_three(self):
        a = np.zeros((5, 5, 5), dtype=bool)
        b = np.zeros((5, 5, 5), dtype=bool)
        a[0, 0, 0] = True
        b[0, 0, 3] = True
        hd95, asd = metrics.surface_distances(a, b)
        assert hd95 == pytest.approx(3.0)
        assert asd == pytest.approx(3.0)

    def test_identical_masks_zero(self):
        rng = np.random.default_rng(3)
        mask = rng.random((6, 6, 6)) < 0.3
        if mask.sum() == 0:
            mask[0, 0, 0] = True
        hd95, asd = metrics.surface_distances(mask, mask)
        assert hd95 == 0.0 and asd == 0.0

    def test_empty_surface_undefined(self):
        empty = np.zeros((4, 4, 4), dtype=bool)
        full = np.ones((4, 4, 4), dtype=bool)
        hd95, asd = metrics.surface_distances(empty, full)
        assert math.isnan(hd95) and math.isnan(asd)


class TestEvaluateCase:
    def test_argmax_threshold_ties_to_background(self):
        probs = np.full((2, 3, 3, 3), 0.5)
        gt = np.ones((3, 3, 3), dtype=bool)
        case = metrics.evaluate_case(probs, gt)
        assert case.dice == 0.0  # ties predict background

    def test_known_prediction(self):
        probs = np.zeros((2, 4, 4, 4))
        probs[0] = 0.9
        probs[1] = 0.1
        probs[:, 1:3, 1:3, 1:3] = np.array([0.2, 0.8]).reshape(2, 1, 1, 1)
        gt = np.zeros((4, 4, 4), dtype=bool)
        gt[1:3, 1:3, 1:3] = True
        case = metrics.evaluate_case(probs, gt, case_id="cube")
        assert case.dice == 1.0 and case.jaccard == 1.0
        assert case.hd95 == 0.0 and case.asd == 0.0
        assert case.case_id == "cube"

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            metrics.evaluate_case(np.zeros((2, 4, 4, 4)), np.zeros((4, 4, 5)))


class TestAggregateAndReport:
    def _cases(self):
        return [
            metrics.CaseMetrics(dice=0.8, jaccard=0.7, hd95=2.0, asd=1.0, case_id="a"),
            metrics.CaseMetrics(dice=0.6, jaccard=0.5, hd95=4.0, asd=2.0, case_id="b"),
            metrics.CaseMetrics(dice=1.0, jaccard=1.0, hd95=float("nan"),
                                asd=float("nan"), case_id="c"),
        ]

    def test_aggregate_skips_undefined_surfaces(self):
        agg = metrics.aggregate(self._cases())
        assert agg["dice"]["mean"] == pytest.approx(0.8)
        assert agg["dice"]["n"] == 3
        assert agg["hd95"]["mean"] == pytest.approx(3.0)
        assert agg["hd95"]["n"] == 2
        assert agg["undefined_surface_cases"] == 1

    def test_write_report_roundtrip(self, tmp_path):
        json_path, csv_path = metrics.write_report(self._cases(), tmp_path)
        report = json.loads(json_path.read_text())
        assert len(report["cases"]) == 3
        assert report["aggregate"]["dice"]["mean"] == pytest.approx(0.8)
        rows = csv_path.read_text().strip().splitlines()
        assert rows[0] == "case_id,dice,jaccard,hd95,asd"
        assert len(rows) == 1 + 3 + 2  # header, cases, mean, std
        assert rows[-2].startswith("mean,")
