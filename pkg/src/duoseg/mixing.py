"""CutMix for unlabeled image pairs and their pseudo-label targets."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidParameterError, ShapeError
from .pseudolabel import PseudoLabel
from .volgeom import CropBox


@dataclass(frozen=True)
class CutMixMask:
    """Binary mask, 1 outside the cut box and 0 inside it."""

    mask: np.ndarray  # (W', H', L') float32 in {0, 1}
    box: CropBox


def sample_mask(crop_size, ratio, rng):
    """One rectangular patch with side lengths round(ratio * crop side)."""
    if not 0.0 < ratio < 1.0:
        raise InvalidParameterError(f"ratio must be in (0, 1), got {ratio}")
    crop_size = tuple(int(s) for s in crop_size)
    patch = tuple(int(round(ratio * s)) for s in crop_size)
    if any(p <= 0 for p in patch):
        raise InvalidParameterError(
            f"ratio {ratio} rounds to an empty patch for crop {crop_size}"
        )
    if any(p >= s for p, s in zip(patch, crop_size)):
        raise InvalidParameterError(
            f"ratio {ratio} rounds to a full-size patch for crop {crop_size}"
        )
    origin = tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(crop_size, patch))
    box = CropBox(origin=origin, size=patch)
    mask = np.ones(crop_size, dtype=np.float32)
    mask[box.slices()] = 0.0
    return CutMixMask(mask=mask, box=box)


def _mask_like(mask, x):
    m = mask.mask
    if isinstance(x, torch.Tensor):
        m = torch.from_numpy(m).to(x.dtype)
    if x.shape != m.shape:
        if x.shape[-3:] == m.shape:  # broadcast over leading class/batch dims
            return m
        raise ShapeError(f"mask shape {m.shape} does not match input {tuple(x.shape)}")
    return m


def apply_cutmix_pair(x_p, x_q, mask):
    """Swap the mask box between the two inputs; returns new arrays."""
    if x_p.shape != x_q.shape:
        raise ShapeError(f"pair shapes differ: {tuple(x_p.shape)} vs {tuple(x_q.shape)}")
    m = _mask_like(mask, x_p)
    out_p = x_p * m + x_q * (1 - m)
    out_q = x_q * m + x_p * (1 - m)
    return out_p, out_q


def apply_cutmix_labels(l_p, l_q, mask):
    """Same mask applied per class channel; kind and barrier are preserved."""
    if l_p.values.shape != l_q.values.shape:
        raise ShapeError(
            f"label shapes differ: {tuple(l_p.values.shape)} vs {tuple(l_q.values.shape)}"
        )
    if l_p.kind is not l_q.kind:
        raise InvalidParameterError(f"mixing labels of kinds {l_p.kind} and {l_q.kind}")
    v_p, v_q = apply_cutmix_pair(l_p.values, l_q.values, mask)
    out_p = PseudoLabel(values=v_p, kind=l_p.kind, source_subnet=l_p.source_subnet,
                        gradient_barrier=l_p.gradient_barrier)
    out_q = PseudoLabel(values=v_q, kind=l_q.kind, source_subnet=l_q.source_subnet,
                        gradient_barrier=l_q.gradient_barrier)
    return out_p, out_q
