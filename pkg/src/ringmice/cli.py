"""Command-line interface: impute, train, inject, benchmark.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .dataset import Schema, load_csv, write_csv
from .errors import DataError, NumericError, RingMiceError, UsageError
from .models import GdConfig, train_lda, train_ridge
from .ring import aggregate, to_dense


def _add_gd(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("gradient descent")
    g.add_argument("--learning-rate", type=float, default=GdConfig.learning_rate)
    g.add_argument("--ridge", type=float, default=GdConfig.ridge)
    g.add_argument("--max-epochs", type=int, default=GdConfig.max_epochs)
    g.add_argument("--tol", type=float, default=GdConfig.tol)
    g.add_argument("--dof-correction", action="store_true",
                   help="residual variance over N - M - 1 instead of N")


def _add_join(p: argparse.ArgumentParser) -> None:
    p.add_argument("--factorized", action="store_true",
                   help="read tables from --join and aggregate over the join without materializing it")
    p.add_argument("--join", type=Path, help="join spec file (with --factorized)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ringmice", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", help="impute missing cells with chained equations")
    p.add_argument("--input", type=Path, help="input CSV (not needed with --factorized)")
    p.add_argument("--schema", type=Path, help="schema file: one name,kind,role line per column")
    p.add_argument("--output", type=Path, required=True, help="imputed CSV to write")
    p.add_argument("--report", type=Path, help="report JSON (default: report.json next to --output)")
    p.add_argument("--strategy", choices=["baseline", "low", "high", "auto"], default="auto")
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--auto-threshold", type=float, default=0.2)
    p.add_argument("--seed", type=int, required=True, help="noise seed (mandatory)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--model", action="append", default=[], metavar="COLUMN=KIND",
                   help="override the model for a column (regression or lda); repeatable")
    p.add_argument("--early-stop", action="store_true",
                   help="stop once the largest relative parameter change falls below 1e-4")
    p.add_argument("--emit-mask", action="store_true", help="also write a 0/1 mask CSV")
    p.add_argument("--sorted-dictionaries", action="store_true",
                   help="number categorical levels in sorted order instead of first-seen order")
    _add_join(p)
    _add_gd(p)

    p = sub.add_parser("train", help="train one model over a complete table and print it")
    p.add_argument("--input", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--target", required=True)
    p.add_argument("--model", choices=["regression", "lda"], help="default: by column kind")
    p.add_argument("--shrinkage", type=float, default=0.0, help="LDA covariance shrinkage")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--sorted-dictionaries", action="store_true")
    _add_join(p)
    _add_gd(p)

    p = sub.add_parser("inject", help="mask cells of a complete table (MCAR, MAR or MNAR)")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--schema", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--pattern", choices=["mcar", "mar", "mnar"], default="mcar")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--targets", help="comma-separated columns to mask (default: every feature)")
    p.add_argument("--driver", help="column driving the MAR probabilities")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--emit-mask", action="store_true")
    p.add_argument("--sorted-dictionaries", action="store_true")

    p = sub.add_parser("benchmark", help="time the imputation strategies on a scenario")
    p.add_argument("--scenario", type=Path, help="key=value scenario file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario key; repeatable")
    p.add_argument("--json", type=Path, help="write the full report here")
    p.add_argument("--csv", type=Path, help="write per-strategy timings here")
    p.add_argument("--factorized", action="store_true",
                   help="time factorized vs materialized join aggregation instead")
    return parser


def _gd(args) -> GdConfig:
    return GdConfig(learning_rate=args.learning_rate, ridge=args.ridge, max_epochs=args.max_epochs,
                    tol=args.tol, dof_correction=args.dof_correction)


def _load_join(args):
    from .factorized import JoinSpec

    if args.join is None:
        raise UsageError("--factorized needs --join SPEC")
    spec = JoinSpec.load(args.join)
    return spec, spec.load_tables(args.sorted_dictionaries)


def _load_single(args):
    if args.input is None or args.schema is None:
        raise UsageError("--input and --schema are required")
    return load_csv(args.input, Schema.load(args.schema), args.sorted_dictionaries)


def cmd_impute(args) -> int:
    from .mice import MiceConfig, run, run_join

    models = {}
    for item in args.model:
        name, sep, kind = item.partition("=")
        if not sep:
            raise UsageError(f"--model expects COLUMN=KIND, got {item!r}")
        models[name.strip()] = kind.strip()
    cfg = MiceConfig(iterations=args.iterations, strategy=args.strategy,
                     auto_threshold=args.auto_threshold, gd=_gd(args), seed=args.seed,
                     models=models, early_stop=args.early_stop, threads=args.threads)
    if args.factorized:
        spec, tables = _load_join(args)
        out, report = run_join(tables, spec, cfg)
    else:
        t = _load_single(args)
        for name in models:
            t.schema.column(name)
        out, report = run(t, cfg)
    write_csv(out, args.output, emit_mask=args.emit_mask)
    report["command"] = sys.argv if args.argv is None else args.argv
    report_path = args.report or args.output.with_name("report.json")
    report_path.write_text(json.dumps(report, indent=2, default=float) + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    if args.factorized:
        from .factorized import aggregate_join

        spec, tables = _load_join(args)
        sp = spec.space(tables)
        for name in spec.tables:
            for a in spec.attrs.get(name, []):
                if tables[name].masks[a].any():
                    raise DataError(f"train needs complete data; {name}.{a} has missing cells")
        C = aggregate_join(tables, spec, sp)
    else:
        t = _load_single(args)
        sp = t.schema.attr_space()
        for name in sp.names:
            if t.masks[name].any():
                raise DataError(f"train needs complete data; column {name!r} has missing cells")
        C = aggregate(t.feature_columns(), sp, threads=args.threads)
    target = sp.index(args.target)
    kind = args.model or ("lda" if sp.is_categorical(target) else "regression")
    cof = to_dense(C)
    if kind == "lda":
        model = train_lda(cof, target, args.shrinkage)
    else:
        model = train_ridge(cof, target, _gd(args))
    print(json.dumps(model.to_dict(), indent=2))
    return 0


def cmd_inject(args) -> int:
    from .evalbench import InjectionSpec, inject

    t = load_csv(args.input, Schema.load(args.schema), args.sorted_dictionaries)
    targets = [s.strip() for s in args.targets.split(",")] if args.targets else []
    for name in targets + ([args.driver] if args.driver else []):
        t.schema.column(name)
    out, _ = inject(t, InjectionSpec(args.pattern, args.rate, targets, args.driver, args.seed))
    write_csv(out, args.output, emit_mask=args.emit_mask)
    return 0


def cmd_benchmark(args) -> int:
    from .evalbench import Scenario, benchmark, benchmark_join, format_table, write_timings_csv

    text = ""
    if args.scenario is not None:
        try:
            text = args.scenario.read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read scenario {args.scenario}: {e}") from None
    sc = Scenario.parse(text + "\n" + "\n".join(args.set))
    if args.factorized:
        report = benchmark_join(sc.rows, sc.repetitions, sc.seed)
        print(f"factorized {report['factorized']:.4f}s  materialized {report['materialized']:.4f}s  "
              f"equal={report['equal']}")
    else:
        report = benchmark(sc)
        print(format_table(report))
        if args.csv:
            write_timings_csv(report, args.csv)
    if args.json:
        args.json.write_text(json.dumps(report, indent=2, default=float) + "\n", encoding="utf-8")
    return 0


COMMANDS = {"impute": cmd_impute, "train": cmd_train, "inject": cmd_inject, "benchmark": cmd_benchmark}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except RingMiceError as e:
        print(f"ringmice {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"ringmice {args.command}: numeric error: {e}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
