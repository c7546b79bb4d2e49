"""Command-line entry point: ``lstmfcn run|suite|probe|export-activations|compare``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import BenchError, ConfigError
from .harness import runner
from .harness.spec import build_spec, load_config


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or key=value experiment config")
    p.add_argument("--dataset", action="append", dest="datasets",
                   help="dataset source (directory, *_TRAIN file, train::test, or synthetic:sine_square?...); repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--cells", help="cell count or comma-separated grid, e.g. 8,64,128")
    p.add_argument("--branch", choices=["LSTM", "ALSTM", "GRU", "RNN", "DENSE"], type=str.upper)
    p.add_argument("--norm", choices=["sample", "dataset"])
    p.add_argument("--no-dimension-shuffle", action="store_true")
    p.add_argument("--repeat", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--workers", type=int, default=None)


def _spec_from_args(args):
    settings = load_config(args.config) if args.config else {}
    workers = settings.pop("workers", None)
    overrides = {"seed": args.seed, "out": args.out, "epochs": args.epochs, "batch": args.batch,
                 "cells": args.cells, "branch": args.branch, "norm": args.norm, "repeat": args.repeat,
                 "dtype": args.dtype}
    if args.datasets:
        overrides["datasets"] = args.datasets
    if args.no_dimension_shuffle:
        overrides["dimension_shuffle"] = False
    settings.update({k: v for k, v in overrides.items() if v is not None})
    workers = args.workers if args.workers is not None else int(workers or 1)
    return build_spec(settings), workers


def cmd_run(args) -> dict:
    spec, workers = _spec_from_args(args)
    records = runner.run_many(runner.expand(spec), workers)
    failed = [r for r in records if r.get("status") != "ok"]
    if failed:
        first = failed[0]
        exc = BenchError(f"{first['label']} on {first['spec']['datasets'][0]} failed "
                         f"at stage {first['stage']}: {first['error']}")
        exc.exit_code = first["exit_code"]
        raise exc
    return {"records": [r["paths"]["record"] for r in records],
            "accuracy": {r["dataset"]["name"]: r["selected"]["test_accuracy"] for r in records}}


def cmd_suite(args) -> dict:
    spec, workers = _spec_from_args(args)
    report = runner.ablation_suite(args.kind, spec, workers)
    return {k: report[k] for k in ("kind", "experiments", "failed", "paths", "summary_path")}


def cmd_probe(args) -> dict:
    result = runner.run_probe(args.checkpoint, args.out, args.dataset, args.epochs, args.batch, args.seed)
    return {"path": result["path"], "accuracy": {f"{f}/{p}": a for (f, p), a in result["accuracy"].items()}}


def cmd_export(args) -> dict:
    filters = [int(f) for f in args.filters.split(",")] if args.filters else None
    blocks = [int(b) - 1 for b in args.blocks.split(",")]
    result = runner.export_activations(args.checkpoint, args.out, args.sample, args.split, args.stage,
                                       blocks, filters, args.seed, source=args.dataset)
    return {"csv": result["csv"], "figure": result["figure"], "columns": list(result["columns"])}


def cmd_compare(args) -> dict:
    return runner.compare(args.records, args.baseline, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lstmfcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train (with optional cell grid search) and record one experiment per dataset")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run an ablation suite and write its reports")
    p.add_argument("kind", choices=runner.SUITES)
    _common(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("probe", help="linear SVM and perceptron probes on a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="override the dataset source stored in the checkpoint")
    p.add_argument("--out", default=".")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export-activations", help="dump one sample's per-filter conv responses (CSV + PNG)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="override the dataset source stored in the checkpoint")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--stage", choices=["conv", "bn", "relu"], default="bn")
    p.add_argument("--blocks", default="1,2,3", help="conv blocks to export (1-based)")
    p.add_argument("--filters", help="one filter index per block; random when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("compare", help="per-dataset accuracy summary of experiment records")
    p.add_argument("records", nargs="+")
    p.add_argument("--baseline")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except BenchError as exc:
        where = getattr(exc, "stage", None)
        print(f"error{f' [{where}]' if where else ''}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
