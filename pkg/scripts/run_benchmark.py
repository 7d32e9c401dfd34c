#!/usr/bin/env python3
"""Time every imputation strategy on synthetic data across missing rates.

Example:
    python scripts/run_benchmark.py --rows 1000000 --rates 0.05 0.2 0.6 --out timings.csv
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from ringmice.evalbench import Scenario, benchmark, benchmark_join, format_table


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--rows", type=int, default=1_000_000)
    p.add_argument("--columns", type=int, default=8)
    p.add_argument("--incomplete", type=int, default=7)
    p.add_argument("--rates", type=float, nargs="+", default=[0.05, 0.2, 0.6])
    p.add_argument("--pattern", choices=["mcar", "mar", "mnar"], default="mcar")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--join-rows", type=int, nargs="*", default=[],
                   help="also time factorized vs materialized aggregation at these fact sizes")
    p.add_argument("--out", help="CSV with one row per (rate, strategy)")
    p.add_argument("--json", help="full reports as JSON")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    rows, reports = [], []
    for rate in args.rates:
        sc = Scenario(pattern=args.pattern, rate=rate, rows=args.rows, columns=args.columns,
                      incomplete=args.incomplete, iterations=args.iterations,
                      repetitions=args.repetitions, seed=args.seed, threads=args.threads)
        rep = benchmark(sc)
        reports.append(rep)
        print(f"\nrate {rate:g} ({args.rows} x {args.columns}, {args.pattern})")
        print(format_table(rep))
        base = rep["strategies"]["baseline"]["per_iteration"]
        for name, s in rep["strategies"].items():
            rows.append({"rate": rate, "strategy": name, "per_iteration": s["per_iteration"],
                         "wall": s["wall"], "speedup_vs_baseline": base / s["per_iteration"]})
    for n in args.join_rows:
        j = benchmark_join(n, args.repetitions, args.seed)
        reports.append(j)
        print(f"\njoin {n} fact rows: factorized {j['factorized']:.4f}s, "
              f"materialized {j['materialized']:.4f}s, equal={j['equal']}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=2, default=float)
    return 0


if __name__ == "__main__":
    sys.exit(main())
