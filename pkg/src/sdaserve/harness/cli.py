"""Command line: ``run``, ``compare`` and ``capacity``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from sdaserve.harness.config import ConfigError, load_config
from sdaserve.harness.experiment import compare_modes, compute_capacity, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdaserve", description="Agentic-serving pipeline simulator.")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, help_ in (("run", "simulate every (load point, policy) pair"),
                        ("compare", "run and pick a winner per load point")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: config's output field)")
        sp.add_argument("--csv", action="store_true", help="also print the report CSV to stdout")
        sp.add_argument("--trace", action="store_true", help="write trace-<point>-<policy>.csv files")
    sp = sub.add_parser("capacity", help="analytic requests/s bound for one mode")
    sp.add_argument("config")
    sp.add_argument("--mode", default="batch_all")
    sp.add_argument("--seed", type=int)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.cmd == "capacity":
        print(f"{compute_capacity(cfg, args.mode):.6f}")
        return 0
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.trace:
        exp = run_experiment(cfg, keep_runs=True, record_trace=True)
        report = exp.report
        for (lp, pol), res in exp.runs.items():
            (out / f"trace-{lp}-{pol}.csv").write_text(res.trace.to_csv())
        if args.cmd == "compare":
            from sdaserve.harness.experiment import pick_winner
            for lp in report.load_points():
                report.winners[lp] = pick_winner([r for r in report.rows if r.load_point == lp])
    else:
        report = compare_modes(cfg) if args.cmd == "compare" else run_experiment(cfg)
    text = report.to_csv()
    (out / "report.csv").write_text(text)
    if args.csv:
        sys.stdout.write(text)
    for lp, w in report.winners.items():
        print(f"winner {lp}: {w}")
    print(f"wrote {out / 'report.csv'} ({len(report.rows)} rows)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
