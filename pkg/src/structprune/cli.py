"""Command-line entry point: ``structprune <subcommand> [--config file.json] [overrides]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigurationError, DataError, StructPruneError
from .experiments import (ExperimentConfig, RunRecord, TIMING_COLUMNS, expand_prune_pipeline, init_prune_pipeline,
                          load_data, load_trained, prune_pipeline, report, timing_sweep, train, write_csv)

EXIT_CODES = {"configuration": 2, "input": 3, "dimension": 4, "structural": 5, "unsupported_model": 6,
              "io": 7, "error": 1}


def _csv_floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _csv_ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--model")
    p.add_argument("--loss", choices=["cross_entropy", "squared"])
    p.add_argument("--method", choices=["sosp_h", "sosp_i", "first_order", "sosp_i_diag", "random"])
    p.add_argument("--ratios", type=_csv_floats, help="comma-separated pruning ratios")
    p.add_argument("--seeds", type=_csv_ints, help="comma-separated seeds")
    p.add_argument("--n-prime", type=int, dest="n_prime")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--layer-cap", type=float, dest="layer_cap")
    p.add_argument("--kernel-scaling", action="store_true", default=None, dest="kernel_scaling")
    p.add_argument("--dataset", help="flat binary image set (train split)")
    p.add_argument("--test-dataset", dest="test_dataset", help="flat binary image set (test split)")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config field, e.g. --set model_kwargs='{\"widths\":[8,8,16,16,32,32]}'")


def build_config(args) -> ExperimentConfig:
    d = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for key in ("model", "loss", "method", "ratios", "seeds", "n_prime", "finetune_epochs", "layer_cap",
                "kernel_scaling", "out_dir"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    train = dict(d.get("train", {}))
    for key in ("epochs", "lr", "momentum", "weight_decay", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            train[key] = val
    d["train"] = train
    if getattr(args, "dataset", None):
        d["dataset"] = {"kind": "file", "train": args.dataset, "test": args.test_dataset}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=JSON, got {item!r}")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    return ExperimentConfig.from_dict(d)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def cmd_train(args):
    cfg = build_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = []
    for seed in cfg.seeds:
        path = args.out or os.path.join(cfg.out_dir, f"{cfg.model}_s{seed}.ckpt")
        out = train(cfg, seed, path)
        _write_json(os.path.splitext(path)[0] + ".history.json", out.history)
        paths.append(path)
    print(json.dumps({"checkpoints": paths, "config_hash": cfg.hash()}))


def cmd_prune(args):
    cfg = build_config(args)
    trained = load_trained(args.checkpoint)
    data = load_data(cfg)
    out = []
    for seed in cfg.seeds:
        for ratio in cfg.ratios:
            rec = prune_pipeline(cfg, trained, seed, ratio, data=data)
            stem = os.path.join(cfg.out_dir, f"prune_{cfg.method}_r{ratio:g}_s{seed}")
            _write_json(stem + ".mask.json", rec.mask)
            rec.save(stem + ".record.json")
            out.append(stem + ".record.json")
    print(json.dumps({"records": out}))


def cmd_init_prune(args):
    cfg = build_config(args)
    data = load_data(cfg)
    out = []
    for seed in cfg.seeds:
        for ratio in cfg.ratios:
            rec = init_prune_pipeline(cfg, seed, ratio, data=data)
            path = os.path.join(cfg.out_dir, f"init_prune_{cfg.method}_r{ratio:g}_s{seed}.record.json")
            rec.save(path)
            out.append(path)
    print(json.dumps({"records": out}))


def cmd_expand_prune(args):
    cfg = build_config(args)
    data = load_data(cfg)
    out = []
    for path in args.base:
        base = RunRecord.load(path)
        res = expand_prune_pipeline(cfg, base, data=data)
        dest = os.path.join(cfg.out_dir, f"expand_prune_s{base.seed}.json")
        _write_json(dest, res.to_dict())
        out.append(dest)
    print(json.dumps({"results": out}))


def cmd_timing(args):
    rows = timing_sweep(args.family, _csv_floats(args.multipliers), args.methods.split(","), args.n_prime,
                        repeats=args.repeats)
    if args.out:
        write_csv(args.out, rows, TIMING_COLUMNS)
    else:
        write_csv(sys.stdout, rows, TIMING_COLUMNS)


def cmd_report(args):
    recs = []
    for path in args.records:
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: not valid JSON ({exc})") from None
        try:
            if isinstance(d, dict) and "widened" in d:       # expand-prune result holds two records
                recs += [RunRecord.from_dict(r) for r in (d["expanded"], d["widened"]) if r]
            else:
                recs.append(RunRecord.from_dict(d))
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
    bundle = report(recs)
    print(json.dumps({"files": bundle.write(args.out_dir)}))


def make_parser():
    ap = argparse.ArgumentParser(prog="structprune", description="Second-order structured pruning toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--out", help="checkpoint path (single seed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune a checkpoint, fine-tune, and record")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("init-prune", help="prune at initialisation, then train twice")
    _common(p)
    p.set_defaults(func=cmd_init_prune)

    p = sub.add_parser("expand-prune", help="expand bottlenecks found in base records")
    _common(p)
    p.add_argument("--base", nargs="+", required=True, help="prune record JSON files")
    p.set_defaults(func=cmd_expand_prune)

    p = sub.add_parser("timing", help="saliency + selection wall-clock over widths")
    p.add_argument("--family", default="mlp_toy")
    p.add_argument("--multipliers", default="1,2,4,8")
    p.add_argument("--methods", default="sosp_h,sosp_i")
    p.add_argument("--n-prime", type=int, default=1000, dest="n_prime")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("report", help="aggregate records into CSV tables")
    p.add_argument("records", nargs="+")
    p.add_argument("--out-dir", default="report", dest="out_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StructPruneError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
