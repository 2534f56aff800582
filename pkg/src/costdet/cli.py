"""Command-line front end: generate / train / evaluate / sweep / compare.

One experiment is a JSON config file plus a seeds list; every flag can also
be given in the config file and explicit flags win. All randomness is
seeded, so rerunning a command with the same config and seeds rewrites the
same dataset, checkpoint, and report bytes (the training log is the one
exception: it records wall time).

Exit codes: 0 success, 2 config error, 3 runtime/data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

from . import detector, evaluator, losses, syndata, trainer
from .errors import ConfigError, DataError

_CONFIG_KEYS = {
    "dataset",
    "gen",
    "train",
    "cost",
    "seeds",
    "threshold",
    "max_det",
    "sweep",
    "out",
    "eval_split",
}
_TRAIN_KEYS = {"epochs", "lr", "augment", "checkpoint_every"}
_SPLIT_CHOICES = ("train", "val", "test", "all")

TABLE_ROWS = (
    ("lesion FP/slice", "lesion_fp_per_slice"),
    ("lesion FNR", "lesion_fnr"),
    ("slice FPR", "slice_fpr"),
    ("slice FNR", "slice_fnr"),
    ("slice ACC", "slice_acc"),
)


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _check_keys(raw, _CONFIG_KEYS, "config")
    _check_keys(raw.get("gen", {}), {f.name for f in dataclasses.fields(syndata.GenConfig)}, "gen")
    _check_keys(raw.get("train", {}), _TRAIN_KEYS, "train")
    _check_keys(raw.get("cost", {}), set(losses.CostConfig().as_dict()), "cost")
    return raw


def _check_keys(section, allowed, name):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {', '.join(unknown)}")


def _gen_config(raw, args):
    d = dict(raw.get("gen", {}))
    for key in ("radius_range", "contrast_range", "split_ratios"):
        if key in d:
            d[key] = tuple(d[key])
    cfg = syndata.GenConfig(**d)
    if getattr(args, "n", None) is not None:
        cfg.n_slices = args.n
    if getattr(args, "positive_fraction", None) is not None:
        cfg.positive_fraction = args.positive_fraction
    seeds = _seed_list(raw, args)
    if seeds is not None:
        if len(seeds) != 1:
            raise ConfigError(f"generate takes exactly one seed, got {seeds}")
        cfg.seed = seeds[0]
    cfg.validate()
    return cfg


def _cost_config(raw, args):
    cost = losses.CostConfig(**raw.get("cost", {}))
    for flag, name in (
        ("alpha_lesion", "alpha_lesion"),
        ("beta_lesion", "beta_lesion"),
        ("alpha_slice", "alpha_slice"),
        ("beta_slice", "beta_slice"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cost, name, value)
    if getattr(args, "use_slice_loss", False):
        cost.use_slice_loss = True
    cost.validate()
    return cost


def _train_config(raw, args, cost, seed):
    d = dict(raw.get("train", {}))
    cfg = trainer.TrainConfig(seed=seed, cost=cost, **d)
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        cfg.lr = args.lr
    if getattr(args, "augment", False):
        cfg.augment = True
    if getattr(args, "checkpoint_every", None) is not None:
        cfg.checkpoint_every = args.checkpoint_every
    cfg.validate()
    return cfg


def _seed_list(raw, args):
    if getattr(args, "seed", None):
        return [_int_seed(s) for s in args.seed]
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError(f"config seeds must be a nonempty list, got {seeds!r}")
        return [_int_seed(s) for s in seeds]
    return None


def _int_seed(s):
    try:
        return int(s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {s!r}") from exc


def _resolve(raw, args, name, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return raw.get(name, default)


def _out_dir(raw, args, required=True):
    out = _resolve(raw, args, "out", None)
    if out is None and required:
        raise ConfigError("no output directory given (use --out or the config file)")
    if out is not None:
        os.makedirs(out, exist_ok=True)
    return out


def _sweep_grid(raw, args):
    text = getattr(args, "thresholds", None)
    if text is not None:
        try:
            grid = tuple(float(tok) for tok in text.split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"bad --thresholds value {text!r}: {exc}") from exc
        return grid
    if "sweep" in raw:
        return tuple(float(t) for t in raw["sweep"])
    return evaluator.DEFAULT_SWEEP


# ---------------------------------------------------------------------------
# dataset and checkpoint loading
# ---------------------------------------------------------------------------


def _load_slices(raw, args):
    path = _resolve(raw, args, "dataset", None)
    if not path:
        raise ConfigError("no dataset directory given (use --dataset or the config file)")
    if not os.path.isdir(path) or not os.path.isfile(os.path.join(path, "manifest.json")):
        raise ConfigError(f"dataset not found at {path} (missing manifest.json)")
    return path, syndata.load_dataset(path)


def _eval_slices(raw, args):
    path, slices = _load_slices(raw, args)
    split = raw.get("eval_split", "test")
    if split not in _SPLIT_CHOICES:
        raise ConfigError(f"eval_split must be one of {_SPLIT_CHOICES}, got {split!r}")
    if split != "all":
        slices = syndata.split_of(slices, split)
    return path, split, slices


def _load_checkpoint(path):
    if not path:
        raise ConfigError("no checkpoint path given")
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint not found at {path}")
    return detector.load_checkpoint(path)


def _regime_label(header):
    if header.get("kind") == "oracle":
        return "oracle"
    return losses.CostConfig(**header.get("cost", {})).tag()


# ---------------------------------------------------------------------------
# output formatting
# ---------------------------------------------------------------------------


def _fmt(v, width=12):
    if isinstance(v, float) and math.isnan(v):
        return "nan".rjust(width)
    return f"{v:.4f}".rjust(width)


def _csv_num(v):
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.10g}"


def print_metric_table(labels, reports, file=None):
    """Rows are the headline rates, one column per weighting regime."""
    file = file or sys.stdout
    name_w = max(len(name) for name, _ in TABLE_ROWS)
    print("metric".ljust(name_w) + "".join(lab.rjust(12) for lab in labels), file=file)
    for name, attr in TABLE_ROWS:
        cells = "".join(_fmt(getattr(rep, attr)) for rep in reports)
        print(name.ljust(name_w) + cells, file=file)


def write_metric_table_csv(labels, reports, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("metric," + ",".join(labels) + "\n")
        for name, attr in TABLE_ROWS:
            cells = ",".join(_csv_num(getattr(rep, attr)) for rep in reports)
            f.write(f"{name},{cells}\n")


def _dedupe(labels):
    seen = {}
    out = []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 else f"{lab}#{seen[lab]}")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    raw = _read_config(args.config)
    cfg = _gen_config(raw, args)
    out = _out_dir(raw, args)
    slices = syndata.generate(cfg)
    manifest = syndata.save_dataset(slices, out)
    evaluator.write_json(
        {"gen": dataclasses.asdict(cfg), "out": out},
        os.path.join(out, "gen_config.json"),
    )
    counts = manifest["split_counts"]
    print(
        f"wrote {manifest['n_slices']} slices to {out} "
        f"(train {counts['train']}, val {counts['val']}, test {counts['test']})"
    )
    return 0


def cmd_train(args):
    raw = _read_config(args.config)
    dataset_path, slices = _load_slices(raw, args)
    cost = _cost_config(raw, args)
    seeds = _seed_list(raw, args) or [trainer.TrainConfig().seed]
    out = _out_dir(raw, args)
    tag = cost.tag()
    for seed in seeds:
        cfg = _train_config(raw, args, cost, seed)
        run_dir = os.path.join(out, f"{tag}_seed{seed}")
        os.makedirs(run_dir, exist_ok=True)
        params, log = trainer.train(slices, cfg, out_dir=run_dir)
        ckpt_path = os.path.join(run_dir, "final.ckpt")
        detector.save_checkpoint(
            params, ckpt_path, cost=cost.as_dict(), extra={"seed": seed, "epochs": cfg.epochs}
        )
        log.write_csv(os.path.join(run_dir, "trainlog.csv"))
        evaluator.write_json(
            {
                "dataset": dataset_path,
                "seeds": [seed],
                "out": out,
                "train": {
                    "epochs": cfg.epochs,
                    "lr": cfg.lr,
                    "augment": cfg.augment,
                    "checkpoint_every": cfg.checkpoint_every,
                },
                "cost": cost.as_dict(),
            },
            os.path.join(run_dir, "config.json"),
        )
        last = log.rows[-1]
        print(
            f"{tag} seed {seed}: {cfg.epochs} epochs, {log.n_updates} updates, "
            f"train total {last['total']:.4f}, val lesion FNR {last['val_lesion_fnr']:.4f} "
            f"-> {ckpt_path}"
        )
    return 0


def cmd_evaluate(args):
    raw = _read_config(args.config)
    _, split, slices = _eval_slices(raw, args)
    threshold = float(_resolve(raw, args, "threshold", 0.7))
    max_det = int(_resolve(raw, args, "max_det", 6))
    labels, reports = [], []
    for path in args.checkpoint:
        params, header = _load_checkpoint(path)
        labels.append(_regime_label(header))
        reports.append(evaluator.evaluate_split(slices, params, threshold=threshold, max_det=max_det))
    labels = _dedupe(labels)
    print(f"split {split}, threshold {threshold:g}, {reports[0].n_slices} slices")
    print_metric_table(labels, reports)
    out = _out_dir(raw, args, required=False)
    if out:
        write_metric_table_csv(labels, reports, os.path.join(out, "table.csv"))
        evaluator.write_json(
            {lab: rep.as_dict() for lab, rep in zip(labels, reports)},
            os.path.join(out, "metrics.json"),
        )
        print(f"wrote {out}/table.csv and {out}/metrics.json")
    return 0


def cmd_sweep(args):
    raw = _read_config(args.config)
    _, split, slices = _eval_slices(raw, args)
    grid = _sweep_grid(raw, args)
    max_det = int(_resolve(raw, args, "max_det", 6))
    params, header = _load_checkpoint(args.checkpoint)
    rows = evaluator.threshold_sweep(params, slices, grid, max_det=max_det)
    print(f"{_regime_label(header)} on split {split}: {len(rows)} thresholds")
    print("threshold  FP/slice  lesion FNR  slice FPR  slice FNR")
    for row in rows:
        rep = row.report
        print(
            f"{row.threshold:9.2f}{rep.lesion_fp_per_slice:10.4f}"
            f"{_fmt(rep.lesion_fnr)}{_fmt(rep.slice_fpr, 11)}{_fmt(rep.slice_fnr, 11)}"
        )
    out = _out_dir(raw, args, required=False)
    if out:
        evaluator.write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
        evaluator.write_sweep_json(rows, os.path.join(out, "sweep.json"))
        print(f"wrote {out}/sweep.csv and {out}/sweep.json")
    return 0


def cmd_compare(args):
    raw = _read_config(args.config)
    _, split, slices = _eval_slices(raw, args)
    threshold = float(_resolve(raw, args, "threshold", 0.7))
    max_det = int(_resolve(raw, args, "max_det", 6))
    grid = _sweep_grid(raw, args)
    baseline_params, _ = _load_checkpoint(args.baseline)
    cost_params, cost_header = _load_checkpoint(args.cost)
    report = evaluator.compare_cost_vs_threshold(
        baseline_params,
        cost_params,
        slices,
        thresholds=grid,
        fnr_level=args.fnr_level,
        threshold=threshold,
        max_det=max_det,
    )
    cost_side, base_side = report["cost"], report["baseline"]
    fnr_key = "lesion_fnr" if args.fnr_level == "lesion" else "slice_fnr"
    print(
        f"{_regime_label(cost_header)} at t={cost_side['threshold']:g}: "
        f"FP/slice {cost_side['lesion_fp_per_slice']:.4f}, "
        f"{args.fnr_level} FNR {cost_side[fnr_key]:.4f}"
    )
    reached = "" if report["target_reached"] else " (target FNR not reached)"
    print(
        f"baseline at t={base_side['threshold']:g}: "
        f"FP/slice {base_side['lesion_fp_per_slice']:.4f}, "
        f"{args.fnr_level} FNR {base_side[fnr_key]:.4f}{reached}"
    )
    print(
        f"delta FP/slice {report['delta']['lesion_fp_per_slice']:+.4f} ({report['summary']})"
    )
    out = _out_dir(raw, args, required=False)
    if out:
        evaluator.write_json(report, os.path.join(out, "compare.json"))
        evaluator.write_compare_svg(report, os.path.join(out, "compare.svg"))
        print(f"wrote {out}/compare.json and {out}/compare.svg")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="costdet",
        description="Cost-sensitive lesion detection on synthetic multi-channel slices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; explicit flags override it")
    common.add_argument("--out", help="output directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="dataset directory written by generate")

    evalopts = argparse.ArgumentParser(add_help=False)
    evalopts.add_argument("--threshold", type=float, help="detection probability threshold (default 0.7)")
    evalopts.add_argument("--max-det", type=int, dest="max_det", help="detections kept per slice (default 6)")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--n", type=int, help="number of slices")
    p.add_argument("--positive-fraction", type=float, dest="positive_fraction")
    p.add_argument("--seed", action="append", help="generator seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common, data], help="train one model per seed")
    p.add_argument("--seed", action="append", help="training seed; repeat for multi-seed runs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha-lesion", type=float, dest="alpha_lesion")
    p.add_argument("--beta-lesion", type=float, dest="beta_lesion")
    p.add_argument("--alpha-slice", type=float, dest="alpha_slice")
    p.add_argument("--beta-slice", type=float, dest="beta_slice")
    p.add_argument("--use-slice-loss", action="store_true", dest="use_slice_loss")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, data, evalopts], help="metric table for checkpoints")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat for one column per regime")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common, data, evalopts], help="metrics across a threshold grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", help="comma-separated grid, e.g. 0.1,0.2,0.3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common, data, evalopts], help="cost model vs threshold-matched baseline")
    p.add_argument("--baseline", required=True, help="baseline checkpoint")
    p.add_argument("--cost", required=True, help="cost-trained checkpoint")
    p.add_argument("--fnr-level", choices=("lesion", "slice"), default="lesion", dest="fnr_level")
    p.add_argument("--thresholds", help="comma-separated sweep grid for the baseline")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
