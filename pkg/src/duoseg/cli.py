"""Command-line entry point: gen-data, train, eval, ablate, plot.

Config files are JSON with two sections, "generator" and "train";
`--set key=value` overrides either section (use a dotted prefix, e.g.
`--set train.beta=4`, to disambiguate). Exit codes: 0 success, 2 usage,
3 config/input validation failure.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from . import plotting
from . import trainer as trainer_mod
from .errors import DuosegError
from .trainer import TrainConfig

GENERATOR_DEFAULTS = {
    "n": 60,
    "volume_size": [32, 32, 32],
    "seed": 0,
    "noise_sigma": 0.2,
    "gradient_amplitude": 0.3,
    "labeled_ratio": 0.1,
    "split_seed": 0,
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path, overrides):
    cfg = {"generator": dict(GENERATOR_DEFAULTS), "train": {}}
    if path:
        loaded = json.loads(Path(path).read_text())
        for section in ("generator", "train"):
            cfg[section].update(loaded.get(section, {}))
        unknown = set(loaded) - {"generator", "train"}
        if unknown:
            raise DuosegError(f"unknown config sections: {sorted(unknown)}")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    for item in overrides or []:
        if "=" not in item:
            raise DuosegError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        value = _parse_value(value)
        if key.startswith(("train.", "generator.")):
            section, key = key.split(".", 1)
        elif key in train_keys:
            section = "train"
        elif key in GENERATOR_DEFAULTS:
            section = "generator"
        else:
            raise DuosegError(f"override key '{key}' matches no config field")
        if section == "train" and key not in train_keys:
            raise DuosegError(f"unknown train config key '{key}'")
        if section == "generator" and key not in GENERATOR_DEFAULTS:
            raise DuosegError(f"unknown generator config key '{key}'")
        cfg[section][key] = value
    return cfg


def _data_dir(args):
    path = getattr(args, "data", None) or os.environ.get("DUOSEG_DATA_DIR")
    if not path:
        raise DuosegError("no dataset directory: pass --data or set DUOSEG_DATA_DIR")
    return Path(path)


def cmd_gen_data(args):
    cfg = _load_config(args.config, args.set)
    gen = cfg["generator"]
    samples = data_mod.generate_synthetic_dataset(
        gen["n"], gen["volume_size"], gen["seed"],
        noise_sigma=gen["noise_sigma"],
        gradient_amplitude=gen["gradient_amplitude"])
    data_mod.save_dataset(samples, args.out, generator_params=gen)
    split, _ = data_mod.split_dataset(samples, gen["labeled_ratio"], gen["split_seed"])
    data_mod.save_split(args.out, split)
    print(f"wrote {len(samples)} samples ({len(split.labeled)} labeled, "
          f"{len(split.unlabeled)} unlabeled) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config, args.set)
    config = TrainConfig.from_dict(cfg["train"])
    run_dir = trainer_mod.train(config, _data_dir(args), args.out,
                                resume_from=args.resume)
    report = json.loads((Path(run_dir) / "report.json").read_text())
    agg = report["aggregate"]
    print(f"run complete: dice={agg['dice']['mean']:.4f} "
          f"jaccard={agg['jaccard']['mean']:.4f} hd95={agg['hd95']['mean']:.3f} "
          f"asd={agg['asd']['mean']:.3f} -> {run_dir}")
    return 0


def cmd_eval(args):
    ckpt = torch.load(args.checkpoint, weights_only=False)
    config = TrainConfig.from_dict(ckpt["config"])
    state = trainer_mod.make_state(config)
    trainer_mod.load_checkpoint(state, args.checkpoint)
    dataset_dir = _data_dir(args)
    split = data_mod.load_split(dataset_dir)
    reference = data_mod.load_eval_reference(dataset_dir)
    out_dir = Path(args.out)
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for sample in split.unlabeled:
        prob = data_mod.sliding_window_predict(state.nets.subnet_1, sample,
                                               config.crop_size, config.stride)
        cases.append(metrics_mod.evaluate_case(prob, reference[sample.id],
                                               case_id=sample.id))
        pred_mask = (prob.values.numpy().argmax(axis=0) > 0).astype(np.uint8)
        pred_mask.tofile(pred_dir / f"{sample.id}.pred.raw")
    metrics_mod.write_report(cases, out_dir, stem="metrics")
    (out_dir / "eval_info.json").write_text(json.dumps({
        "dataset_dir": str(dataset_dir),
        "cases": [c.case_id for c in cases],
    }, indent=2))
    agg = metrics_mod.aggregate(cases)
    print(f"evaluated {len(cases)} cases: dice={agg['dice']['mean']:.4f}")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args.config, args.set)
    base = TrainConfig.from_dict(cfg["train"])
    grid_spec = json.loads(Path(args.grid).read_text())
    grid = [(v["name"], v.get("set", {})) for v in grid_spec["variants"]]
    n_seeds = int(grid_spec.get("n_seeds", 3))
    rows = trainer_mod.run_ablation(base, grid, _data_dir(args), args.out,
                                    n_seeds=n_seeds, jobs=args.jobs)
    plotting.plot_ablation_bars(Path(args.out) / "ablation.csv")
    for row in rows:
        print(f"{row['variant']:>16}: dice={row['dice']:.4f} "
              f"jaccard={row['jaccard']:.4f} hd95={row['hd95']:.3f} "
              f"asd={row['asd']:.3f}")
    return 0


def _plot_overlays(run_dir, out_dir):
    info_path = Path(run_dir) / "eval_info.json"
    if not info_path.exists():
        return []
    info = json.loads(info_path.read_text())
    dataset_dir = Path(info["dataset_dir"])
    reference = data_mod.load_eval_reference(dataset_dir)
    samples = {s.id: s for s in data_mod.load_dataset(dataset_dir)}
    overlay_dir = Path(out_dir) / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for case_id in info["cases"]:
        sample = samples[case_id]
        pred = np.fromfile(Path(run_dir) / "predictions" / f"{case_id}.pred.raw",
                           dtype=np.uint8).reshape(sample.image.shape)
        written.append(plotting.plot_case_overlay(
            sample.image, reference[case_id], pred,
            overlay_dir / f"{case_id}.png", case_id=case_id))
    return written


def cmd_plot(args):
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise DuosegError(f"run directory {run_dir} does not exist")
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if (run_dir / "losses.csv").exists():
        written.append(plotting.plot_loss_curves(run_dir, out_dir / "loss_curves.png"))
    if (run_dir / "ablation.csv").exists():
        written.append(plotting.plot_ablation_bars(run_dir / "ablation.csv",
                                                   out_dir / "ablation_metrics.png"))
    written.extend(_plot_overlays(run_dir, out_dir))
    if not written:
        raise DuosegError(f"nothing to plot in {run_dir}")
    for path in written:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="duoseg",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset + split")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a co-training experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="emit figures for a run, eval, or table")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except (DuosegError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
