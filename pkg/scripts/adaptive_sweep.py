"""Compiled max_throughput intent against the best static mode per load point.

    python scripts/adaptive_sweep.py [--config configs/default.json] [--seeds 1-10] [--out out/adaptive.csv]
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from _common import parse_seeds, write_rows
from sdaserve.harness import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.json"))
    ap.add_argument("--seeds", default="1-10")
    ap.add_argument("--out", default="out/adaptive.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = []
    for s in parse_seeds(args.seeds):
        rep = run_experiment(replace(cfg, seed=s))
        rows += rep.rows
        for lp in rep.load_points():
            here = [r for r in rep.rows if r.load_point == lp]
            best = max((r for r in here if r.policy != "adaptive"), key=lambda r: r.goodput_rps)
            ad = rep.row(lp, "adaptive")
            print(f"seed {s} {lp:>5}: adaptive/{best.policy} {ad.goodput_rps / best.goodput_rps:.3f}  "
                  f"switches {ad.mode_switches}")
    write_rows(args.out, rows)


if __name__ == "__main__":
    main()
