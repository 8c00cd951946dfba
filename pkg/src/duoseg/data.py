"""Synthetic volumetric dataset generation, on-disk format, splitting, the
sigma-aware crop sampler, and sliding-window inference.

On-disk layout (one directory per dataset):
    manifest.json          sample list + split + generator parameters
    eval_manifest.json     ground-truth references for "unlabeled" samples
    <id>.img.raw           little-endian float32, C order, axes (W, H, L)
    <id>.mask.raw          uint8, same order
    <id>.json              sidecar: id, shape, dtypes, generator parameters
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import volgeom
from .errors import ConfigurationError, InvalidParameterError
from .pseudolabel import ProbabilityVolume
from .volgeom import CropBox


@dataclass
class VolumeSample:
    image: np.ndarray            # (W, H, L) float32
    mask: Optional[np.ndarray]   # (W, H, L) uint8 in {0..Y-1}, or None
    id: str

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise InvalidParameterError(
                f"mask shape {self.mask.shape} != image shape {self.image.shape}"
            )


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    split_seed: int
    labeled_ratio: float


@dataclass
class CropSampler:
    crop_size: tuple
    sigma: int
    rng: np.random.Generator

    def sample_origin(self, volume_shape, margin=None):
        """Uniform origin with the given margin (defaults to sigma, which
        keeps all four shifted crops in-bounds). Labeled crops carry no
        shifted candidates and use margin 0 so border voxels stay covered."""
        margin = self.sigma if margin is None else margin
        origin = []
        for dim, size in zip(volume_shape, self.crop_size):
            lo, hi = margin, dim - size - margin
            if hi < lo:
                raise ConfigurationError(
                    f"volume dim {dim} too small for crop {size} with margin "
                    f"{margin}"
                )
            origin.append(int(self.rng.integers(lo, hi + 1)))
        return CropBox(origin=tuple(origin), size=tuple(self.crop_size))


@dataclass
class TrainingBatch:
    """2 labeled crops with masks + 2 unlabeled fixed crops with geometry.

    Unlabeled entries deliberately carry no mask field.
    """

    labeled_images: list
    labeled_masks: list
    labeled_ids: list
    unlabeled_images: list
    unlabeled_ids: list
    fixed_boxes: list
    shifted_candidates: list  # per crop: dict ShiftDirection -> CropBox, or None when sigma == 0
    unlabeled_volumes: list = field(default_factory=list)  # parent volumes, for shifted crops


# ---------------------------------------------------------------------------
# synthetic generation


def _random_rotation(rng):
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid_union_mask(shape, rng):
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1)
    mask = np.zeros(shape, dtype=bool)
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        center = np.array([rng.uniform(0.25 * s, 0.75 * s) for s in shape])
        radii = rng.uniform(0.14, 0.30, size=3) * np.array(shape)
        rot = _random_rotation(rng)
        rel = (coords - center) @ rot.T
        mask |= ((rel / radii) ** 2).sum(axis=-1) <= 1.0
    return mask


def _lowfreq_field(shape, rng, n_waves=3):
    """Smooth low-frequency intensity field: a few random sinusoidal plane
    waves with wavelengths on the volume scale, normalized to unit max."""
    coords = np.stack(
        np.meshgrid(*[np.linspace(-0.5, 0.5, s) for s in shape], indexing="ij"),
        axis=-1,
    )
    field = np.zeros(shape)
    for _ in range(n_waves):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.sin(
            2 * np.pi * freq * (coords @ direction) + phase
        )
    return field / np.abs(field).max()


def generate_synthetic_dataset(n, volume_size, seed, noise_sigma=0.2,
                               gradient_amplitude=0.3):
    """Ellipsoid-union phantoms: binary mask, noisy image with a smooth
    intensity gradient. Deterministic given seed; per-sample rng streams."""
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    volume_size = tuple(int(s) for s in volume_size)
    if any(s < 8 for s in volume_size):
        raise InvalidParameterError(f"volume size too small: {volume_size}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        # resample until the foreground fraction is sane; deterministic
        for _ in range(64):
            mask = _ellipsoid_union_mask(volume_size, rng)
            frac = mask.mean()
            if 0.01 < frac < 0.5:
                break
        gradient = gradient_amplitude * _lowfreq_field(volume_size, rng)
        image = mask.astype(np.float32) + gradient.astype(np.float32)
        if noise_sigma > 0:
            image = image + rng.normal(0.0, noise_sigma, volume_size).astype(np.float32)
        samples.append(VolumeSample(image=image.astype(np.float32),
                                    mask=mask.astype(np.uint8),
                                    id=f"sample_{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# persistence


def save_dataset(samples, out_dir, generator_params=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_file = f"{s.id}.img.raw"
        mask_file = f"{s.id}.mask.raw" if s.mask is not None else None
        sidecar_file = f"{s.id}.json"
        s.image.astype("<f4").tofile(out_dir / img_file)
        if s.mask is not None:
            s.mask.astype(np.uint8).tofile(out_dir / mask_file)
        sidecar = {
            "id": s.id,
            "shape": list(s.image.shape),
            "image_dtype": "<f4",
            "mask_dtype": "u1",
            "order": "C (W-major)",
            "generator": generator_params or {},
        }
        (out_dir / sidecar_file).write_text(json.dumps(sidecar, indent=2))
        entries.append({"id": s.id, "image": img_file, "mask": mask_file,
                        "sidecar": sidecar_file})
    manifest = {"samples": entries, "generator": generator_params or {}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir / "manifest.json"


def _read_sample(dataset_dir, entry, with_mask=True):
    dataset_dir = Path(dataset_dir)
    sidecar = json.loads((dataset_dir / entry["sidecar"]).read_text())
    shape = tuple(sidecar["shape"])
    image = np.fromfile(dataset_dir / entry["image"], dtype="<f4").reshape(shape)
    mask = None
    if with_mask and entry.get("mask"):
        mask = np.fromfile(dataset_dir / entry["mask"], dtype=np.uint8).reshape(shape)
    return VolumeSample(image=image, mask=mask, id=entry["id"])


def load_dataset(dataset_dir):
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    return [_read_sample(dataset_dir, e) for e in manifest["samples"]]


def save_split(dataset_dir, split):
    """Record the split in the manifest; unlabeled ground truth goes to the
    separate eval manifest, which the trainer never reads."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["split"] = {
        "labeled_ids": [s.id for s in split.labeled],
        "unlabeled_ids": [s.id for s in split.unlabeled],
        "seed": split.split_seed,
        "labeled_ratio": split.labeled_ratio,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    by_id = {e["id"]: e for e in manifest["samples"]}
    eval_manifest = {
        "cases": [{"id": s.id, "mask": by_id[s.id]["mask"]} for s in split.unlabeled]
    }
    (dataset_dir / "eval_manifest.json").write_text(json.dumps(eval_manifest, indent=2))


def load_split(dataset_dir):
    """Load the persisted split; unlabeled samples come back without masks."""
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    if "split" not in manifest:
        raise ConfigurationError(f"no split recorded in {dataset_dir}/manifest.json")
    by_id = {e["id"]: e for e in manifest["samples"]}
    info = manifest["split"]
    labeled = [_read_sample(dataset_dir, by_id[i], with_mask=True)
               for i in info["labeled_ids"]]
    unlabeled = [_read_sample(dataset_dir, by_id[i], with_mask=False)
                 for i in info["unlabeled_ids"]]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled,
                        split_seed=info["seed"], labeled_ratio=info["labeled_ratio"])


def load_eval_reference(dataset_dir):
    """Ground-truth masks for the unlabeled samples, evaluation only."""
    dataset_dir = Path(dataset_dir)
    eval_manifest = json.loads((dataset_dir / "eval_manifest.json").read_text())
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    by_id = {e["id"]: e for e in manifest["samples"]}
    out = {}
    for case in eval_manifest["cases"]:
        sidecar = json.loads((dataset_dir / by_id[case["id"]]["sidecar"]).read_text())
        shape = tuple(sidecar["shape"])
        out[case["id"]] = np.fromfile(dataset_dir / case["mask"],
                                      dtype=np.uint8).reshape(shape)
    return out


# ---------------------------------------------------------------------------
# splitting and batch sampling


def split_dataset(samples, labeled_ratio, seed):
    """Seeded shuffle then prefix split; unlabeled masks are withheld and
    returned separately for evaluation use only."""
    if not 0.0 < labeled_ratio < 1.0:
        raise InvalidParameterError(f"labeled_ratio must be in (0, 1), got {labeled_ratio}")
    n_labeled = int(round(labeled_ratio * len(samples)))
    if n_labeled == 0 or n_labeled == len(samples):
        raise InvalidParameterError(
            f"ratio {labeled_ratio} on {len(samples)} samples gives a degenerate split"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    labeled = [samples[i] for i in order[:n_labeled]]
    withheld = {samples[i].id: samples[i].mask for i in order[n_labeled:]}
    unlabeled = [VolumeSample(image=samples[i].image, mask=None, id=samples[i].id)
                 for i in order[n_labeled:]]
    split = DatasetSplit(labeled=labeled, unlabeled=unlabeled,
                         split_seed=int(seed), labeled_ratio=float(labeled_ratio))
    return split, withheld


def sample_training_batch(split, sampler, n_labeled=2, n_unlabeled=2):
    """2 labeled crops + 2 unlabeled fixed crops with shifted candidates."""
    if not split.labeled or not split.unlabeled:
        raise ConfigurationError("split must have both labeled and unlabeled samples")
    rng = sampler.rng
    lab_idx = rng.choice(len(split.labeled), size=n_labeled,
                         replace=len(split.labeled) < n_labeled)
    unl_idx = rng.choice(len(split.unlabeled), size=n_unlabeled,
                         replace=len(split.unlabeled) < n_unlabeled)
    labeled_images, labeled_masks, labeled_ids = [], [], []
    for i in lab_idx:
        s = split.labeled[int(i)]
        box = sampler.sample_origin(s.image.shape, margin=0)
        labeled_images.append(volgeom.crop_volume(s.image, box))
        labeled_masks.append(volgeom.crop_volume(s.mask, box))
        labeled_ids.append(s.id)
    unlabeled_images, unlabeled_ids, fixed_boxes, candidates, volumes = [], [], [], [], []
    for i in unl_idx:
        s = split.unlabeled[int(i)]
        box = sampler.sample_origin(s.image.shape)
        unlabeled_images.append(volgeom.crop_volume(s.image, box))
        unlabeled_ids.append(s.id)
        fixed_boxes.append(box)
        if sampler.sigma > 0:
            cand = volgeom.shifted_crop_set(box, sampler.sigma)
            for b in cand.values():
                b.validate_inside(s.image.shape)
            candidates.append(cand)
        else:
            candidates.append(None)
        volumes.append(s.image)
    return TrainingBatch(
        labeled_images=labeled_images, labeled_masks=labeled_masks,
        labeled_ids=labeled_ids, unlabeled_images=unlabeled_images,
        unlabeled_ids=unlabeled_ids, fixed_boxes=fixed_boxes,
        shifted_candidates=candidates, unlabeled_volumes=volumes,
    )


# ---------------------------------------------------------------------------
# sliding-window inference


def sliding_window_predict(subnet, sample, crop_size, stride):
    """Tile the volume, average per-voxel probabilities, renormalize."""
    crop_size = tuple(int(s) for s in crop_size)
    stride = tuple(int(s) for s in stride)
    if any(st <= 0 for st in stride):
        raise InvalidParameterError(f"stride must be positive, got {stride}")
    if any(st > cs for st, cs in zip(stride, crop_size)):
        raise InvalidParameterError(f"stride {stride} exceeds crop size {crop_size}")
    shape = sample.image.shape
    if any(dim < cs for dim, cs in zip(shape, crop_size)):
        raise ConfigurationError(f"volume {shape} smaller than crop {crop_size}")

    starts = []
    for dim, cs, st in zip(shape, crop_size, stride):
        pos = list(range(0, dim - cs + 1, st))
        if pos[-1] != dim - cs:
            pos.append(dim - cs)  # clamp the last window to the far edge
        starts.append(pos)

    num_classes = subnet.config.num_classes
    acc = np.zeros((num_classes,) + shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.float64)
    was_training = subnet.training
    subnet.eval()
    try:
        with torch.no_grad():
            for x0 in starts[0]:
                for y0 in starts[1]:
                    for z0 in starts[2]:
                        box = CropBox(origin=(x0, y0, z0), size=crop_size)
                        crop = volgeom.crop_volume(sample.image, box)
                        probs = subnet(
                            torch.as_tensor(crop, dtype=torch.float32)[None, None]
                        )[0].numpy()
                        acc[(slice(None),) + box.slices()] += probs
                        count[box.slices()] += 1.0
    finally:
        subnet.train(was_training)
    acc /= count[None]
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityVolume(values=torch.from_numpy(acc.astype(np.float32)),
                             source_subnet="sliding_window")
