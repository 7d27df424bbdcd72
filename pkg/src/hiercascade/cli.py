"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench, pipeline
from .dataset import generate_synthetic, save_csv
from .taxonomy import TaxonomyError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("hiercascade")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hiercascade", description="Two-level cascaded classification toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tx = sub.add_parser("taxonomy", help="taxonomy utilities")
    txs = tx.add_subparsers(dest="action", required=True, parser_class=_Parser)
    val = txs.add_parser("validate", help="load and validate a taxonomy file")
    val.add_argument("path", help="taxonomy JSON, or 'nw45' for the bundled one")

    data = sub.add_parser("data", help="dataset utilities")
    ds = data.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = ds.add_parser("gen", help="write a synthetic hierarchical dataset as CSV")
    gen.add_argument("--taxonomy", default="nw45")
    gen.add_argument("--per-class", type=int, default=50)
    gen.add_argument("--separation", type=float, default=10.0)
    gen.add_argument("--overlap", type=float, default=0.0)
    gen.add_argument("--dim", type=int)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output CSV path")

    _add_run_flags(sub.add_parser("train", help="train all node models for every fold"))

    ev = sub.add_parser("eval", help="run experiments 1-3 and the flat baseline")
    _add_run_flags(ev)
    ev.add_argument("--experiments", default="all",
                    help="comma list from 1,2,3,flat or 'all' (default)")

    _add_run_flags(sub.add_parser("estimate", help="cascade accuracy estimate per fold"))

    bn = sub.add_parser("bench", help="batch timing of flat vs hierarchical inference")
    _add_run_flags(bn)
    bn.add_argument("--batch-size", type=int, default=bench.DEFAULT_BATCH_SIZE)
    bn.add_argument("--repeats", type=int, default=bench.DEFAULT_REPEATS)
    bn.add_argument("--mode", choices=("flat", "topdown", "bottomup", "all"), default="all")
    bn.add_argument("--format", choices=("json", "csv", "table"), default="table")
    return ap


def _config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config)
    for name in ("seed", "folds", "out", "jobs"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    cfg.validate()
    return cfg


def _run(args) -> int:
    if args.command == "taxonomy":
        t = pipeline.resolve_taxonomy(args.path)
        for c in range(t.n_coarse):
            print(f"{t.coarse[c].name}: {len(t.fine_set(c))} fine classes")
        print(f"valid: {t.n_coarse} coarse, {t.n_fine} fine")
        return EXIT_OK
    if args.command == "data":
        t = pipeline.resolve_taxonomy(args.taxonomy)
        ds = generate_synthetic(t, args.per_class, args.separation, args.overlap, args.seed, args.dim)
        save_csv(ds, args.out, t)
        print(f"wrote {len(ds)} samples to {args.out}")
        return EXIT_OK

    cfg = _config(args)
    if args.command == "train":
        run = pipeline.cmd_train(cfg)
        print(run)
    elif args.command == "eval":
        exps = ("1", "2", "3", "flat") if args.experiments == "all" else tuple(
            x.strip() for x in args.experiments.split(",") if x.strip())
        reports = pipeline.cmd_evaluate(cfg, exps)
        for m, r in reports.items():
            print(f"{m:<9} {r.overall_str()}")
    elif args.command == "estimate":
        doc = pipeline.cmd_estimate(cfg)
        print(f"estimate {doc['mean_overall_estimate']:.4f}  "
              f"empirical {doc['mean_empirical_topdown']:.4f}  gap {doc['mean_gap']:.4f}")
    elif args.command == "bench":
        if args.repeats < 1 or args.batch_size < 1:
            raise _UsageError("--repeats and --batch-size must be >= 1")
        report = pipeline.cmd_bench(cfg, args.batch_size, args.repeats, args.mode)
        if args.format == "json":
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.format == "csv":
            print(bench.bench_csv(report), end="")
        else:
            print(bench.format_bench_table(report, digits=4))
    return EXIT_OK


class _UsageError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except _UsageError as exc:
        print(f"hiercascade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.data_error_types() + (TaxonomyError,) as exc:
        print(f"hiercascade: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"hiercascade: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
