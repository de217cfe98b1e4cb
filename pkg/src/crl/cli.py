"""Command line entry point: ``crl gen-data | train | eval | compare | bench-suite``.

Errors are reported as one line on stderr, ``error kind=<kind> message=<json string>``.
Usage and configuration problems exit with status 2, everything else with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, checkpoint, harness, metrics
from .datagen import Dataset, load_dataset, save_dataset
from .errors import ConfigError, CRLError


def _config(args) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        return harness.load_config(args.config)
    return harness.ExperimentConfig()


def _apply_overrides(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    loss = cfg.loss
    for flag, key in (("loss", "name"), ("mining", "mining"), ("k", "k"), ("hist_bins", "hist_bins"),
                      ("m_apc", "m_apc")):
        value = getattr(args, flag, None)
        if value is not None:
            loss = replace(loss, **{key: value})
    base = cfg.baseline
    if args.baseline is not None:
        base = replace(base, mode=args.baseline)
    if args.ref_attr is not None:
        base = replace(base, ref_attr=args.ref_attr)
    train = cfg.train
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    if args.dump_mining is not None:
        train = replace(train, dump_mining=args.dump_mining)
    cfg = replace(cfg, loss=loss, baseline=base, train=train)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg.validate()


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    train, test = harness.build_data(cfg.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.test_out:
        save_dataset(train, out)
        save_dataset(test, args.test_out)
    else:
        save_dataset(Dataset(train.schema, np.concatenate([train.features, test.features]),
                             np.concatenate([train.labels, test.labels])), out)
    print(f"wrote {out}" + (f" and {args.test_out}" if args.test_out else ""))
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(_config(args), args)
    seeds = [args.seed] if args.seed is not None else None
    for rec in harness.run_experiment(cfg, seeds=seeds, resume=args.resume):
        path = harness.run_dir_for(cfg, rec.seed) / "record.json"
        print(f"{rec.method} seed={rec.seed} mean_sensitivity={rec.report.mean_sensitivity:.2f} record={path}")
    return 0


def cmd_eval(args) -> int:
    if args.print_config:
        print(harness.dump_config(_config(args)), end="")
        return 0
    if not args.checkpoint or not args.data:
        raise ConfigError("eval needs --checkpoint and --data (or --print-config)")
    params, _, _ = checkpoint.load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = harness.evaluate_model(params, ds)
    print(metrics.report_json(report) if args.json else report.to_text())
    return 0


def cmd_compare(args) -> int:
    records = []
    for p in args.records:
        p = Path(p)
        paths = sorted(p.rglob("record.json")) if p.is_dir() else [p]
        records += [harness.RunRecord.load(f) for f in paths]
    if not records:
        raise ConfigError("no run records found")
    comp = harness.compare(records, baseline=args.baseline)
    if args.out:
        harness.write_comparison(comp, args.out)
    print(comp.text())
    return 0


def cmd_bench_suite(args) -> int:
    base = _config(args)
    if args.epochs is not None:
        base = replace(base, train=replace(base.train, epochs=args.epochs))
    seeds = tuple(args.seeds) if args.seeds else bench.SUITE_SEEDS
    crit = bench.run_suite(args.out, seeds=seeds, jobs=args.jobs or bench.default_jobs(), base=base)
    print((Path(args.out) / "gains.txt").read_text(), end="")
    for name in ("trend", "variants", "baselines"):
        print(f"{name}: {'PASS' if crit[name]['pass'] else 'FAIL'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--config", "--spec", dest="config", help="experiment TOML; its [data] section is used")
    g.add_argument("--out", required=True)
    g.add_argument("--test-out", help="write the held-out split here and only the train split to --out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method for the configured seeds")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--dump-mining", help="directory for per-batch profile and hard-set JSON")
    t.add_argument("--loss", choices=["ce", "crl-r", "crl-a", "crl-d"])
    t.add_argument("--mining", choices=["class", "instance"])
    t.add_argument("--k", type=int)
    t.add_argument("--hist-bins", type=int)
    t.add_argument("--m-apc", type=float)
    t.add_argument("--baseline", choices=list(harness.BASELINES))
    t.add_argument("--ref-attr", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory (overrides the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--json", action="store_true")
    e.add_argument("--print-config", action="store_true", help="print the effective config with all defaults")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="gain tables over a baseline method")
    c.add_argument("records", nargs="+", help="record.json files or directories searched recursively")
    c.add_argument("--baseline", default="ce")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench-suite", help="run the full synthetic benchmark and check its trends")
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--jobs", type=int)
    b.add_argument("--seeds", type=int, nargs="+")
    b.add_argument("--epochs", type=int)
    b.set_defaults(func=cmd_bench_suite)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("not-found", str(exc), 2)
    except ConfigError as exc:
        return _fail(exc.kind, str(exc), 2)
    except CRLError as exc:
        return _fail(exc.kind, str(exc), 1)
    except OSError as exc:
        return _fail("io", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
