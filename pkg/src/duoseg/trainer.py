"""Co-training loop: per-iteration forwards, pseudo-label construction,
asymmetric CutMix, loss assembly, independent SGD steps per subnet,
checkpointing, and the ablation harness.

Per iteration (both unlabeled losses enabled, CutMix on):
  1. both subnets forward the labeled crops -> supervised losses;
  2. subnet 1 (train mode) forwards the fixed unlabeled crops; subnet 2
     (inference mode) produces fixed + temporary pseudo-labels, composed
     into dynamic ones; subnet 1's fixed/dynamic MSE losses follow;
  3. subnet 1 (inference mode) produces its own fixed + dynamic labels;
     the unlabeled pair and the labels are CutMixed with one shared mask;
     subnet 2 (train mode) forwards the mixed images; subnet 2's losses;
  4. totals alpha*sup + fix + beta*dyn; each optimizer steps on its own
     total only.
"""

import copy
import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import mixing, pseudolabel, volgeom
from .errors import ConfigurationError, InvalidParameterError
from .network import SegNetConfig, build_dual
from .pseudolabel import LabelKind, PseudoLabel, sharpen_probs


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 4.0
    sigma: int = 5
    temperature: float = 0.1
    crop_size: tuple = (16, 16, 16)
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    cutmix_enabled: bool = True
    cutmix_ratio: float = 0.5
    fix_enabled: bool = True
    dyn_enabled: bool = True
    max_iterations: int = 2000
    base_lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    rampup_iterations: int = 0  # 0 disables the Gaussian ramp-up on unsup terms
    data_seed: int = 0
    model_seed_1: int = 1
    model_seed_2: int = 2
    loop_seed: int = 3
    eval_every: int = 0  # 0 = evaluate only at the end
    checkpoint_every: int = 0  # 0 = final checkpoint only
    stride: tuple = (8, 8, 8)
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 2
    dropout: float = 0.2
    ensemble_eval: bool = False

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(s) for s in self.crop_size))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if self.sigma < 0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.model_seed_1 == self.model_seed_2:
            raise InvalidParameterError("model seeds must differ")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["crop_size"] = list(self.crop_size)
        d["stride"] = list(self.stride)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def net_config(self):
        return SegNetConfig(in_channels=self.in_channels, num_classes=self.num_classes,
                            base_width=self.base_width, depth=self.depth,
                            crop_size=self.crop_size, dropout=self.dropout)


@dataclass
class TrainState:
    config: TrainConfig
    nets: object
    optim_1: torch.optim.SGD
    optim_2: torch.optim.SGD
    data_rng: np.random.Generator
    loop_rng: np.random.Generator
    iteration: int = 0


def poly_lr(iteration, config):
    if iteration < 0 or iteration > config.max_iterations:
        raise InvalidParameterError(
            f"iteration {iteration} outside [0, {config.max_iterations}]"
        )
    return config.base_lr * (1.0 - iteration / config.max_iterations) ** config.lr_power


def _rampup_weight(iteration, config):
    if config.rampup_iterations <= 0:
        return 1.0
    t = min(iteration / config.rampup_iterations, 1.0)
    return float(math.exp(-5.0 * (1.0 - t) ** 2))


def make_state(config, resume_from=None):
    nets = build_dual(config.net_config(), config.model_seed_1, config.model_seed_2)
    optim_1 = torch.optim.SGD(nets.subnet_1.parameters(), lr=config.base_lr,
                              momentum=config.momentum,
                              weight_decay=config.weight_decay)
    optim_2 = torch.optim.SGD(nets.subnet_2.parameters(), lr=config.base_lr,
                              momentum=config.momentum,
                              weight_decay=config.weight_decay)
    state = TrainState(config=config, nets=nets, optim_1=optim_1, optim_2=optim_2,
                       data_rng=np.random.default_rng(config.data_seed),
                       loop_rng=np.random.default_rng(config.loop_seed))
    torch.manual_seed(config.loop_seed)
    if resume_from is not None:
        load_checkpoint(state, resume_from)
    return state


def save_checkpoint(state, path):
    """Self-describing container: weights, optimizer states, rng states."""
    torch.save({
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "model_1": state.nets.subnet_1.state_dict(),
        "model_2": state.nets.subnet_2.state_dict(),
        "optim_1": state.optim_1.state_dict(),
        "optim_2": state.optim_2.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "loop_rng": state.loop_rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(state, path):
    ckpt = torch.load(path, weights_only=False)
    state.nets.subnet_1.load_state_dict(ckpt["model_1"])
    state.nets.subnet_2.load_state_dict(ckpt["model_2"])
    state.optim_1.load_state_dict(ckpt["optim_1"])
    state.optim_2.load_state_dict(ckpt["optim_2"])
    state.data_rng.bit_generator.state = ckpt["data_rng"]
    state.loop_rng.bit_generator.state = ckpt["loop_rng"]
    torch.set_rng_state(ckpt["torch_rng"])
    state.iteration = ckpt["iteration"]
    return ckpt


def _one_hot(masks, num_classes):
    m = torch.as_tensor(np.stack(masks).astype(np.int64))
    return torch.nn.functional.one_hot(m, num_classes).movedim(-1, 1).float()


def _image_batch(crops):
    return torch.as_tensor(np.stack(crops), dtype=torch.float32)[:, None]


def _pseudo_labels_eval(subnet, crops, temperature, kind, source):
    """Batched inference-mode forward then sharpening, one label per crop."""
    net_input = _image_batch(crops)
    was_training = subnet.training
    subnet.eval()
    try:
        with torch.no_grad():
            probs = subnet(net_input)
    finally:
        subnet.train(was_training)
    return [PseudoLabel(values=sharpen_probs(probs[i], temperature), kind=kind,
                        source_subnet=source)
            for i in range(len(crops))]


def _dynamic_geometry(state, batch):
    """Pick one shifted crop per unlabeled entry; sigma=0 degenerates to the
    fixed crop with a full overlap."""
    dyn_crops, overlaps = [], []
    for j in range(len(batch.unlabeled_images)):
        fixed_box = batch.fixed_boxes[j]
        if state.config.sigma == 0 or batch.shifted_candidates[j] is None:
            dyn_crops.append(batch.unlabeled_images[j])
            overlaps.append(volgeom.full_overlap(fixed_box.size))
            continue
        _, dyn_box = volgeom.select_dynamic_crop(batch.shifted_candidates[j],
                                                 state.loop_rng)
        dyn_crops.append(volgeom.crop_volume(batch.unlabeled_volumes[j], dyn_box))
        overlaps.append(volgeom.overlap_in_fixed_frame(fixed_box, dyn_box))
    return dyn_crops, overlaps


def train_step(state, batch):
    """One co-training iteration; returns a LossReport per subnet."""
    cfg = state.config
    lr = poly_lr(state.iteration, cfg)
    for opt in (state.optim_1, state.optim_2):
        for group in opt.param_groups:
            group["lr"] = lr

    sn1, sn2 = state.nets.subnet_1, state.nets.subnet_2
    sn1.train()
    sn2.train()
    weights = losses_mod.LossWeights(alpha=cfg.alpha, beta=cfg.beta)
    ramp = _rampup_weight(state.iteration, cfg)

    labeled = _image_batch(batch.labeled_images)
    targets = _one_hot(batch.labeled_masks, cfg.num_classes)
    sup_1 = losses_mod.supervised_loss(sn1(labeled), targets)
    sup_2 = losses_mod.supervised_loss(sn2(labeled), targets)

    use_unsup = cfg.fix_enabled or cfg.dyn_enabled
    zero = torch.zeros(())
    fix_1 = dyn_1 = fix_2 = dyn_2 = zero
    if use_unsup:
        fixed_crops = batch.unlabeled_images
        dyn_crops, overlaps = _dynamic_geometry(state, batch)

        # subnet 1 learns from subnet 2 on the original crops
        pred_1 = sn1(_image_batch(fixed_crops))
        fixed_pl_2 = _pseudo_labels_eval(sn2, fixed_crops, cfg.temperature,
                                         LabelKind.FIXED, "subnet_2")
        if cfg.fix_enabled:
            fix_1 = losses_mod.mse_loss(pred_1, torch.stack(
                [pl.values for pl in fixed_pl_2])) * ramp
        if cfg.dyn_enabled:
            temp_pl_2 = _pseudo_labels_eval(sn2, dyn_crops, cfg.temperature,
                                            LabelKind.TEMPORARY, "subnet_2")
            dyn_pl_2 = [pseudolabel.make_dynamic_pseudo_label(f, t, ov)
                        for f, t, ov in zip(fixed_pl_2, temp_pl_2, overlaps)]
            dyn_1 = losses_mod.mse_loss(pred_1, torch.stack(
                [pl.values for pl in dyn_pl_2])) * ramp

        # subnet 2 learns from subnet 1; only subnet 2 sees the CutMix images
        fixed_pl_1 = _pseudo_labels_eval(sn1, fixed_crops, cfg.temperature,
                                         LabelKind.FIXED, "subnet_1")
        dyn_pl_1 = None
        if cfg.dyn_enabled:
            temp_pl_1 = _pseudo_labels_eval(sn1, dyn_crops, cfg.temperature,
                                            LabelKind.TEMPORARY, "subnet_1")
            dyn_pl_1 = [pseudolabel.make_dynamic_pseudo_label(f, t, ov)
                        for f, t, ov in zip(fixed_pl_1, temp_pl_1, overlaps)]

        if cfg.cutmix_enabled and len(fixed_crops) >= 2:
            mask = mixing.sample_mask(cfg.crop_size, cfg.cutmix_ratio, state.loop_rng)
            sn2_inputs, fix_targets, dyn_targets = _cutmix_pairs(
                fixed_crops, fixed_pl_1, dyn_pl_1, mask)
        else:
            sn2_inputs = [torch.as_tensor(c, dtype=torch.float32) for c in fixed_crops]
            fix_targets = [pl.values for pl in fixed_pl_1]
            dyn_targets = [pl.values for pl in dyn_pl_1] if dyn_pl_1 else None
        pred_2 = sn2(torch.stack(sn2_inputs)[:, None])
        if cfg.fix_enabled:
            fix_2 = losses_mod.mse_loss(pred_2, torch.stack(fix_targets)) * ramp
        if cfg.dyn_enabled:
            dyn_2 = losses_mod.mse_loss(pred_2, torch.stack(dyn_targets)) * ramp

    total_1 = cfg.alpha * sup_1 + fix_1 + cfg.beta * dyn_1
    total_2 = cfg.alpha * sup_2 + fix_2 + cfg.beta * dyn_2

    state.optim_1.zero_grad()
    total_1.backward()
    state.optim_1.step()
    state.optim_2.zero_grad()
    total_2.backward()
    state.optim_2.step()

    report_1 = losses_mod.total_loss(sup_1.detach().item(), fix_1.detach().item(),
                                     dyn_1.detach().item(), weights,
                                     subnet="subnet_1")
    report_2 = losses_mod.total_loss(sup_2.detach().item(), fix_2.detach().item(),
                                     dyn_2.detach().item(), weights,
                                     subnet="subnet_2")
    return report_1, report_2


def _cutmix_pairs(fixed_crops, fixed_pl, dyn_pl, mask):
    """Pair crop i with crop i + n/2 under one shared mask."""
    n = len(fixed_crops)
    half = n // 2
    images = [torch.as_tensor(c, dtype=torch.float32) for c in fixed_crops]
    out_images = list(images)
    fix_targets = [pl.values for pl in fixed_pl]
    dyn_targets = [pl.values for pl in dyn_pl] if dyn_pl else None
    for i in range(half):
        j = i + half
        out_images[i], out_images[j] = mixing.apply_cutmix_pair(images[i], images[j], mask)
        mp, mq = mixing.apply_cutmix_labels(fixed_pl[i], fixed_pl[j], mask)
        fix_targets[i], fix_targets[j] = mp.values, mq.values
        if dyn_pl:
            dp, dq = mixing.apply_cutmix_labels(dyn_pl[i], dyn_pl[j], mask)
            dyn_targets[i], dyn_targets[j] = dp.values, dq.values
    return out_images, fix_targets, dyn_targets


def evaluate(state, split, eval_reference):
    """Sliding-window prediction on the held-out (unlabeled) samples."""
    cfg = state.config
    cases = []
    for sample in split.unlabeled:
        prob = data_mod.sliding_window_predict(state.nets.subnet_1, sample,
                                               cfg.crop_size, cfg.stride)
        if cfg.ensemble_eval:
            prob_2 = data_mod.sliding_window_predict(state.nets.subnet_2, sample,
                                                     cfg.crop_size, cfg.stride)
            avg = (prob.values + prob_2.values) / 2
            prob = pseudolabel.ProbabilityVolume(values=avg, source_subnet="ensemble")
        cases.append(metrics_mod.evaluate_case(prob, eval_reference[sample.id],
                                               case_id=sample.id))
    return cases


def train(config, dataset_dir, out_dir, resume_from=None):
    """Run the full loop; returns the run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = data_mod.load_split(dataset_dir)
    eval_reference = data_mod.load_eval_reference(dataset_dir)
    sample_shape = split.labeled[0].image.shape
    for dim, size in zip(sample_shape, config.crop_size):
        if dim - size - 2 * config.sigma < 0:
            raise ConfigurationError(
                f"volume {sample_shape} too small for crop {config.crop_size} "
                f"with sigma {config.sigma}"
            )

    state = make_state(config, resume_from=resume_from)
    sampler = data_mod.CropSampler(crop_size=config.crop_size, sigma=config.sigma,
                                   rng=state.data_rng)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    loss_path = out_dir / "losses.csv"
    metric_path = out_dir / "metrics_history.csv"
    mode = "a" if resume_from is not None and loss_path.exists() else "w"
    loss_fh = open(loss_path, mode, newline="")
    loss_writer = csv.writer(loss_fh)
    if mode == "w":
        loss_writer.writerow(["iteration", "lr",
                              "sn1_sup", "sn1_fix", "sn1_dyn", "sn1_total",
                              "sn2_sup", "sn2_fix", "sn2_dyn", "sn2_total"])
    metric_rows = []

    try:
        while state.iteration < config.max_iterations:
            batch = data_mod.sample_training_batch(
                split, sampler, n_labeled=config.labeled_batch,
                n_unlabeled=config.unlabeled_batch)
            r1, r2 = train_step(state, batch)
            lr = poly_lr(state.iteration, config)
            state.iteration += 1
            loss_writer.writerow([state.iteration, lr,
                                  r1.sup, r1.fix, r1.dyn, r1.total,
                                  r2.sup, r2.fix, r2.dyn, r2.total])
            if (config.checkpoint_every > 0
                    and state.iteration % config.checkpoint_every == 0):
                save_checkpoint(state, out_dir / f"checkpoint_{state.iteration:06d}.pt")
            if (config.eval_every > 0
                    and state.iteration % config.eval_every == 0
                    and state.iteration < config.max_iterations):
                cases = evaluate(state, split, eval_reference)
                agg = metrics_mod.aggregate(cases)
                metric_rows.append([state.iteration, agg["dice"]["mean"],
                                    agg["jaccard"]["mean"], agg["hd95"]["mean"],
                                    agg["asd"]["mean"]])
    finally:
        loss_fh.close()

    cases = evaluate(state, split, eval_reference)
    agg = metrics_mod.aggregate(cases)
    metric_rows.append([state.iteration, agg["dice"]["mean"], agg["jaccard"]["mean"],
                        agg["hd95"]["mean"], agg["asd"]["mean"]])
    with open(metric_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "dice", "jaccard", "hd95", "asd"])
        writer.writerows(metric_rows)
    metrics_mod.write_report(cases, out_dir, stem="metrics")

    save_checkpoint(state, out_dir / "checkpoint_final.pt")
    report = {
        "iterations": state.iteration,
        "aggregate": agg,
        "config": config.to_dict(),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return out_dir


# ---------------------------------------------------------------------------
# ablation harness

COMPONENT_GRID = [
    ("sup_only", {"fix_enabled": False, "dyn_enabled": False, "cutmix_enabled": False}),
    ("fix_cutmix", {"fix_enabled": True, "dyn_enabled": False, "cutmix_enabled": True}),
    ("fix_dyn", {"fix_enabled": True, "dyn_enabled": True, "cutmix_enabled": False}),
    ("fix_dyn_cutmix", {"fix_enabled": True, "dyn_enabled": True, "cutmix_enabled": True}),
]


def _variant_config(base, overrides, seed_index):
    d = base.to_dict()
    d.update(overrides)
    cfg = TrainConfig.from_dict(d)
    # shared data seed across variants; model/loop seeds vary per repeat
    shift = 1000 * seed_index
    return dataclasses.replace(cfg,
                               model_seed_1=cfg.model_seed_1 + shift,
                               model_seed_2=cfg.model_seed_2 + shift,
                               loop_seed=cfg.loop_seed + shift)


def _run_variant(args):
    name, cfg, dataset_dir, run_dir = args
    train(cfg, dataset_dir, run_dir)
    report = json.loads((Path(run_dir) / "report.json").read_text())
    return {k: report["aggregate"][k]["mean"]
            for k in ("dice", "jaccard", "hd95", "asd")}


def run_ablation(base_config, grid, dataset_dir, out_dir, n_seeds=3, jobs=1):
    """Train every variant n_seeds times (shared data seed), report the
    per-metric median. Partial results survive individual failures."""
    if not grid:
        raise InvalidParameterError("ablation grid is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for name, overrides in grid:
        for s in range(n_seeds):
            cfg = _variant_config(base_config, overrides, s)
            tasks.append((name, cfg, str(dataset_dir), str(out_dir / name / f"seed_{s}")))

    results = {}
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_variant_safe, tasks))
    else:
        outcomes = [_run_variant_safe(t) for t in tasks]
    for (name, _, _, _), metrics in zip(tasks, outcomes):
        results.setdefault(name, []).append(metrics)

    rows = []
    for name, _ in grid:
        runs = [m for m in results.get(name, []) if m is not None]
        row = {"variant": name}
        for metric in ("dice", "jaccard", "hd95", "asd"):
            vals = [r[metric] for r in runs if not math.isnan(r[metric])]
            row[metric] = float(np.median(vals)) if vals else float("nan")
        rows.append(row)

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "dice", "jaccard",
                                                "hd95", "asd"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _run_variant_safe(task):
    try:
        return _run_variant(task)
    except Exception as exc:  # keep partial results on per-run failure
        print(f"ablation run {task[3]} failed: {exc}")
        return None
