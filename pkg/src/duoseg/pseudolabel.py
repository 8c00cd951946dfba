"""Pseudo-label construction: sharpening and the fixed/temporary/dynamic kinds.

Pseudo-labels are always detached from the producing subnet, so no loss
computed against them can push gradients back into the producer.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from . import volgeom
from .errors import InvalidParameterError, ShapeError


class LabelKind(Enum):
    FIXED = "fixed"
    TEMPORARY = "temporary"
    DYNAMIC = "dynamic"


@dataclass
class ProbabilityVolume:
    """Per-voxel class probabilities (C, W', H', L') from one subnet."""

    values: torch.Tensor
    source_subnet: str = ""
    crop: Optional[volgeom.CropBox] = None


@dataclass
class PseudoLabel:
    values: torch.Tensor  # (C, W', H', L'), detached
    kind: LabelKind
    source_subnet: str = ""
    gradient_barrier: bool = True


def sharpen_probs(probs, temperature):
    """p_c^{1/T} / sum_k p_k^{1/T} along the class dim (dim 0 or 1)."""
    if temperature <= 0 or temperature > 1:
        raise InvalidParameterError(f"temperature must be in (0, 1], got {temperature}")
    p = probs.detach()
    sharp = p ** (1.0 / temperature)
    dim = 0 if p.dim() == 4 else 1
    return sharp / sharp.sum(dim=dim, keepdim=True).clamp_min(1e-12)


def sharpen(probs, temperature, kind=LabelKind.FIXED):
    if kind is LabelKind.DYNAMIC:
        raise InvalidParameterError("dynamic labels only come from make_dynamic_pseudo_label")
    values = probs.values if isinstance(probs, ProbabilityVolume) else probs
    source = probs.source_subnet if isinstance(probs, ProbabilityVolume) else ""
    return PseudoLabel(values=sharpen_probs(values, temperature), kind=kind,
                       source_subnet=source)


def make_fixed_pseudo_label(subnet, crop_image, temperature, kind=LabelKind.FIXED,
                            source=""):
    """Inference-mode forward then sharpen; crop_image is (W', H', L')."""
    crop_image = torch.as_tensor(crop_image, dtype=torch.float32)
    if crop_image.dim() != 3:
        raise ShapeError(f"expected a 3D crop, got shape {tuple(crop_image.shape)}")
    was_training = subnet.training
    subnet.eval()
    try:
        with torch.no_grad():
            probs = subnet(crop_image[None, None])[0]
    finally:
        subnet.train(was_training)
    return PseudoLabel(values=sharpen_probs(probs, temperature), kind=kind,
                       source_subnet=source)


def make_dynamic_pseudo_label(fixed, temp, overlap):
    """COM composition per class channel; output kind is DYNAMIC."""
    if fixed.kind is not LabelKind.FIXED or temp.kind is not LabelKind.TEMPORARY:
        raise InvalidParameterError(
            f"need (FIXED, TEMPORARY) inputs, got ({fixed.kind}, {temp.kind})"
        )
    if fixed.values.shape != temp.values.shape:
        raise ShapeError(
            f"label shapes differ: {tuple(fixed.values.shape)} vs {tuple(temp.values.shape)}"
        )
    channels = []
    for c in range(fixed.values.shape[0]):
        composed = volgeom.compose_dynamic_label(
            fixed.values[c].numpy(), temp.values[c].numpy(), overlap
        )
        channels.append(torch.from_numpy(composed))
    return PseudoLabel(values=torch.stack(channels), kind=LabelKind.DYNAMIC,
                       source_subnet=fixed.source_subnet)
