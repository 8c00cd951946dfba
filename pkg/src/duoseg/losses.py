"""Loss terms: supervised CE + soft Dice, MSE-based fixed/dynamic unsupervised
losses, and the per-subnet total with alpha/beta weighting."""

import math
from dataclasses import dataclass

import torch

from .errors import InvalidParameterError, NumericError, ShapeError
from .pseudolabel import LabelKind, ProbabilityVolume, PseudoLabel

CE_EPS = 1e-8
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5  # supervised weight
    beta: float = 4.0   # dynamic-loss weight

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    sup: float
    fix: float
    dyn: float
    total: float
    subnet: str = ""


def _as_tensor(x):
    if isinstance(x, (ProbabilityVolume, PseudoLabel)):
        x = x.values
    return torch.as_tensor(x)


def _batched(pred, target):
    """Normalize to (B, C, W, H, L) and check shapes."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() == 4:
        pred, target = pred[None], target[None]
    if pred.dim() != 5:
        raise ShapeError(f"expected (B,C,W,H,L) or (C,W,H,L), got {tuple(pred.shape)}")
    return pred, target


def cross_entropy(pred, target):
    """Mean over voxels of -sum_c target_c * log(pred_c + eps)."""
    pred, target = _batched(pred, target)
    ce = -(target * torch.log(pred + CE_EPS)).sum(dim=1)
    return ce.mean()


def soft_dice_loss(pred, target):
    """1 - Dice on the foreground channels, soft in pred.

    Binary: channel 1 only. Multi-class: mean over non-background channels.
    """
    pred, target = _batched(pred, target)
    dims = (2, 3, 4)
    inter = (pred[:, 1:] * target[:, 1:]).sum(dim=dims)
    denom = pred[:, 1:].sum(dim=dims) + target[:, 1:].sum(dim=dims)
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1 - dice).mean()


def supervised_loss(pred, target):
    """CE + soft Dice, averaged over the labeled batch."""
    return cross_entropy(pred, target) + soft_dice_loss(pred, target)


def mse_loss(pred, target):
    """Mean over all channels and voxels of the squared difference."""
    pred, target = _batched(pred, target)
    if target.requires_grad:
        raise InvalidParameterError("pseudo-label target must be detached")
    return ((pred - target) ** 2).mean()


def fixed_unsup_loss(pred, fixed_label):
    if isinstance(fixed_label, PseudoLabel) and fixed_label.kind is not LabelKind.FIXED:
        raise InvalidParameterError(f"expected a FIXED pseudo-label, got {fixed_label.kind}")
    return mse_loss(pred, fixed_label)


def dynamic_unsup_loss(pred, dynamic_label):
    if isinstance(dynamic_label, PseudoLabel) and dynamic_label.kind is not LabelKind.DYNAMIC:
        raise InvalidParameterError(
            f"expected a DYNAMIC pseudo-label, got {dynamic_label.kind}"
        )
    return mse_loss(pred, dynamic_label)


def total_loss(sup, fix, dyn, weights, subnet=""):
    """total = alpha * sup + fix + beta * dyn (fix carries implicit weight 1)."""
    terms = {"sup": float(sup), "fix": float(fix), "dyn": float(dyn)}
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericError(f"loss term '{name}' is non-finite: {v}")
    total = weights.alpha * terms["sup"] + terms["fix"] + weights.beta * terms["dyn"]
    return LossReport(sup=terms["sup"], fix=terms["fix"], dyn=terms["dyn"],
                      total=total, subnet=subnet)
