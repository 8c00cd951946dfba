"""Loss tests: values against naive references, analytic vs numeric gradients,
and the weighted total."""

import math

import numpy as np
import pytest
import torch

from duoseg import losses
from duoseg.errors import InvalidParameterError, NumericError, ShapeError
from duoseg.losses import LossWeights
from duoseg.pseudolabel import LabelKind, PseudoLabel


def random_probs(rng, shape=(2, 3, 3, 3), dtype=torch.float64):
    logits = rng.normal(size=shape)
    exp = np.exp(logits - logits.max(axis=0, keepdims=True))
    return torch.tensor(exp / exp.sum(axis=0, keepdims=True), dtype=dtype)


def random_onehot(rng, shape=(2, 3, 3, 3), dtype=torch.float64):
    labels = rng.integers(0, shape[0], size=shape[1:])
    onehot = np.zeros(shape)
    for c in range(shape[0]):
        onehot[c] = labels == c
    return torch.tensor(onehot, dtype=dtype)


def numeric_gradient(fn, x, h=1e-5):
    """Central finite differences in 64-bit, one coordinate at a time."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = fn(x).item()
        flat[i] = orig - h
        f_minus = fn(x).item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def check_gradient(fn, x, tol=1e-4):
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = numeric_gradient(fn, x)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    rel = (analytic - numeric).norm().item() / denom
    assert rel < tol, f"gradient relative error {rel:.3e}"


class TestCrossEntropy:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(0)
        pred = random_probs(rng, (3, 4, 4, 4))
        target = random_onehot(rng, (3, 4, 4, 4))
        got = losses.cross_entropy(pred, target).item()
        want = 0.0
        p, t = pred.numpy(), target.numpy()
        for idx in np.ndindex(4, 4, 4):
            for c in range(3):
                want -= t[(c,) + idx] * math.log(p[(c,) + idx] + losses.CE_EPS)
        want /= 4 ** 3
        assert abs(got - want) < 1e-12

    def test_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(1)
        target = random_onehot(rng)
        assert losses.cross_entropy(target, target).item() < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(2)
        for i in range(50):
            target = random_onehot(rng, (2, 2, 2, 2))
            x0 = random_probs(rng, (2, 2, 2, 2))
            check_gradient(lambda p: losses.cross_entropy(p, target), x0)


class TestSoftDice:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(0)
        pred = random_probs(rng, (2, 4, 4, 4))
        target = random_onehot(rng, (2, 4, 4, 4))
        got = losses.soft_dice_loss(pred, target).item()
        p1, t1 = pred[1].numpy(), target[1].numpy()
        inter = float((p1 * t1).sum())
        s = losses.DICE_SMOOTH
        want = 1 - (2 * inter + s) / (p1.sum() + t1.sum() + s)
        assert abs(got - want) < 1e-12

    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(1)
        target = random_onehot(rng)
        assert losses.soft_dice_loss(target, target).item() < 1e-6

    def test_empty_foreground_both_is_zero(self):
        pred = torch.zeros(2, 3, 3, 3, dtype=torch.float64)
        pred[0] = 1.0
        assert losses.soft_dice_loss(pred, pred.clone()).item() == pytest.approx(0.0)

    def test_multiclass_averages_foreground_channels(self):
        rng = np.random.default_rng(2)
        pred = random_probs(rng, (3, 4, 4, 4))
        target = random_onehot(rng, (3, 4, 4, 4))
        got = losses.soft_dice_loss(pred, target).item()
        per_channel = []
        s = losses.DICE_SMOOTH
        for c in (1, 2):
            pc, tc = pred[c].numpy(), target[c].numpy()
            inter = float((pc * tc).sum())
            per_channel.append(1 - (2 * inter + s) / (pc.sum() + tc.sum() + s))
        assert got == pytest.approx(np.mean(per_channel), abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        for i in range(50):
            target = random_onehot(rng, (2, 2, 2, 2))
            x0 = random_probs(rng, (2, 2, 2, 2))
            check_gradient(lambda p: losses.soft_dice_loss(p, target), x0)


class TestMse:
    def test_matches_mean_square(self):
        rng = np.random.default_rng(0)
        pred = torch.tensor(rng.normal(size=(2, 3, 3, 3)))
        target = torch.tensor(rng.normal(size=(2, 3, 3, 3)))
        got = losses.mse_loss(pred, target).item()
        assert got == pytest.approx(((pred - target) ** 2).mean().item(), abs=1e-15)

    def test_rejects_grad_bearing_target(self):
        pred = torch.zeros(2, 2, 2, 2)
        target = torch.zeros(2, 2, 2, 2, requires_grad=True)
        with pytest.raises(InvalidParameterError):
            losses.mse_loss(pred, target)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        for i in range(50):
            target = torch.tensor(rng.normal(size=(2, 2, 2, 2)))
            x0 = torch.tensor(rng.normal(size=(2, 2, 2, 2)))
            check_gradient(lambda p: losses.mse_loss(p, target), x0)

    def test_kind_gates(self):
        values = torch.zeros(2, 2, 2, 2)
        fixed = PseudoLabel(values=values, kind=LabelKind.FIXED)
        dyn = PseudoLabel(values=values, kind=LabelKind.DYNAMIC)
        pred = torch.zeros(2, 2, 2, 2)
        assert losses.fixed_unsup_loss(pred, fixed).item() == 0.0
        assert losses.dynamic_unsup_loss(pred, dyn).item() == 0.0
        with pytest.raises(InvalidParameterError):
            losses.fixed_unsup_loss(pred, dyn)
        with pytest.raises(InvalidParameterError):
            losses.dynamic_unsup_loss(pred, fixed)


class TestShapes:
    def test_mismatch_raises(self):
        with pytest.raises(ShapeError):
            losses.cross_entropy(torch.zeros(2, 3, 3, 3), torch.zeros(2, 3, 3, 4))

    def test_batched_equals_mean_of_cases(self):
        rng = np.random.default_rng(0)
        preds = [random_probs(rng) for _ in range(3)]
        targets = [random_onehot(rng) for _ in range(3)]
        batched = losses.supervised_loss(torch.stack(preds), torch.stack(targets))
        single = np.mean([losses.supervised_loss(p, t).item()
                          for p, t in zip(preds, targets)])
        assert batched.item() == pytest.approx(single, abs=1e-12)

    def test_wrong_rank_raises(self):
        with pytest.raises(ShapeError):
            losses.mse_loss(torch.zeros(3, 3, 3), torch.zeros(3, 3, 3))


class TestTotal:
    def test_weighted_sum(self):
        report = losses.total_loss(1.25, 0.5, 0.125,
                                   LossWeights(alpha=0.5, beta=4.0), subnet="subnet_1")
        assert report.total == pytest.approx(0.5 * 1.25 + 0.5 + 4.0 * 0.125, abs=1e-15)
        assert report.subnet == "subnet_1"

    def test_default_weights(self):
        w = LossWeights()
        assert (w.alpha, w.beta) == (0.5, 4.0)

    def test_rejects_negative_or_nonfinite_weights(self):
        with pytest.raises(InvalidParameterError):
            LossWeights(alpha=-1.0)
        with pytest.raises(InvalidParameterError):
            LossWeights(beta=float("nan"))

    def test_nonfinite_term_raises(self):
        w = LossWeights()
        with pytest.raises(NumericError):
            losses.total_loss(float("nan"), 0.0, 0.0, w)
        with pytest.raises(NumericError):
            losses.total_loss(0.0, float("inf"), 0.0, w)
