"""Crop-coordinate algebra for the shifted-crop pseudo-label pipeline.

All boxes live in integer voxel coordinates with half-open [lo, hi)
intervals. The first spatial axis is x (horizontal), the second y
(vertical), the third z (depth). Shifts only ever move a crop along
x or y.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import BoundsError, InvalidParameterError, NoOverlapError, ShapeError

AXIS_NAMES = ("x", "y", "z")


class ShiftDirection(Enum):
    LEFT_X = (-1, 0)
    RIGHT_X = (1, 0)
    DOWN_Y = (0, -1)
    UP_Y = (0, 1)

    def offset(self, sigma):
        sx, sy = self.value
        return (sx * sigma, sy * sigma, 0)


@dataclass(frozen=True)
class CropBox:
    origin: tuple  # (x, y, z) in parent coordinates; may be negative for shifted boxes
    size: tuple    # (sx, sy, sz), all > 0

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(v) for v in self.origin))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise InvalidParameterError("CropBox needs 3-vectors for origin and size")
        if any(s <= 0 for s in self.size):
            raise InvalidParameterError(f"CropBox size must be positive, got {self.size}")

    @property
    def end(self):
        return tuple(o + s for o, s in zip(self.origin, self.size))

    def validate_inside(self, parent_shape):
        for ax, (o, e, dim) in enumerate(zip(self.origin, self.end, parent_shape)):
            if o < 0 or e > dim:
                raise BoundsError(
                    f"crop [{o},{e}) exceeds parent extent {dim} on axis {AXIS_NAMES[ax]}"
                )

    def slices(self):
        return tuple(slice(o, e) for o, e in zip(self.origin, self.end))


@dataclass(frozen=True)
class OverlapMap:
    """Intersection of a fixed and a shifted crop, in each crop's local frame.

    fixed_region / shifted_region are triples of half-open (lo, hi) intervals
    with identical extents; complement is a list of interval triples tiling
    the rest of the fixed crop.
    """

    fixed_region: tuple
    shifted_region: tuple
    complement: tuple = field(default=())

    @property
    def fixed_slices(self):
        return tuple(slice(lo, hi) for lo, hi in self.fixed_region)

    @property
    def shifted_slices(self):
        return tuple(slice(lo, hi) for lo, hi in self.shifted_region)

    def region_voxels(self):
        n = 1
        for lo, hi in self.fixed_region:
            n *= hi - lo
        return n

    def complement_voxels(self):
        total = 0
        for block in self.complement:
            n = 1
            for lo, hi in block:
                n *= hi - lo
            total += n
        return total


def full_overlap(size):
    """Degenerate map where the shifted crop coincides with the fixed one."""
    region = tuple((0, int(s)) for s in size)
    return OverlapMap(fixed_region=region, shifted_region=region, complement=())


def crop_volume(volume, box):
    volume = np.asarray(volume)
    box.validate_inside(volume.shape)
    return volume[box.slices()]


def shifted_crop_set(fixed, sigma):
    """Four candidate boxes shifted by sigma voxels along +-x and +-y.

    No bounds check here; the sampler guarantees a sigma margin.
    """
    if sigma <= 0:
        raise InvalidParameterError(f"sigma must be >= 1, got {sigma}")
    out = {}
    for d in ShiftDirection:
        off = d.offset(sigma)
        out[d] = CropBox(
            origin=tuple(o + v for o, v in zip(fixed.origin, off)),
            size=fixed.size,
        )
    return out


def select_dynamic_crop(candidates, rng):
    """Uniformly pick one of the four shifted candidates."""
    if len(candidates) != len(ShiftDirection):
        raise InvalidParameterError(
            f"expected {len(ShiftDirection)} candidates, got {len(candidates)}"
        )
    directions = list(ShiftDirection)
    d = directions[int(rng.integers(len(directions)))]
    return d, candidates[d]


def overlap_in_fixed_frame(fixed, shifted):
    """Map the intersection of two equal-size boxes into both local frames."""
    if fixed.size != shifted.size:
        raise ShapeError(f"box sizes differ: {fixed.size} vs {shifted.size}")
    lo = tuple(max(a, b) for a, b in zip(fixed.origin, shifted.origin))
    hi = tuple(min(a, b) for a, b in zip(fixed.end, shifted.end))
    if any(h <= l for l, h in zip(lo, hi)):
        raise NoOverlapError(f"boxes {fixed} and {shifted} are disjoint")
    fixed_region = tuple((l - o, h - o) for l, h, o in zip(lo, hi, fixed.origin))
    shifted_region = tuple((l - o, h - o) for l, h, o in zip(lo, hi, shifted.origin))
    complement = _box_complement(fixed.size, fixed_region)
    return OverlapMap(fixed_region=fixed_region, shifted_region=shifted_region,
                      complement=tuple(complement))


def _box_complement(size, region):
    """Slab decomposition of [0,size) minus region into disjoint blocks."""
    blocks = []
    remaining = [(0, int(s)) for s in size]
    for ax in range(3):
        lo, hi = region[ax]
        rlo, rhi = remaining[ax]
        if rlo < lo:
            block = list(remaining)
            block[ax] = (rlo, lo)
            blocks.append(tuple(block))
        if hi < rhi:
            block = list(remaining)
            block[ax] = (hi, rhi)
            blocks.append(tuple(block))
        remaining[ax] = (lo, hi)
    return blocks


def compose_dynamic_label(fixed_label, temp_label, overlap):
    """COM step: temporary label on the overlap, fixed label elsewhere.

    Works on any 3D array-like supporting numpy-style slicing; inputs are
    not mutated.
    """
    fixed_label = np.asarray(fixed_label)
    temp_label = np.asarray(temp_label)
    if fixed_label.shape != temp_label.shape:
        raise ShapeError(
            f"label shapes differ: {fixed_label.shape} vs {temp_label.shape}"
        )
    for ax, (lo, hi) in enumerate(overlap.fixed_region):
        if lo < 0 or hi > fixed_label.shape[ax]:
            raise ShapeError(
                f"overlap region {overlap.fixed_region} does not fit labels of "
                f"shape {fixed_label.shape} on axis {AXIS_NAMES[ax]}"
            )
    out = fixed_label.copy()
    out[overlap.fixed_slices] = temp_label[overlap.shifted_slices]
    return out
