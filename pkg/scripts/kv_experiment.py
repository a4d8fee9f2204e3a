"""KV-cache placement: no balancing vs post-hoc transfer vs controller hints.

    python scripts/kv_experiment.py [--config configs/kv.json] [--seeds 1-10] [--out out/kv.csv]
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from _common import parse_seeds, write_rows
from sdaserve.harness import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]
MODES = ("none", "post_hoc_transfer", "hints")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "kv.json"))
    ap.add_argument("--seeds", default="1-10")
    ap.add_argument("--out", default="out/kv.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = []
    totals = dict.fromkeys(MODES, 0.0)
    seeds = parse_seeds(args.seeds)
    for s in seeds:
        line = []
        for lb in MODES:
            row = run_experiment(replace(cfg, seed=s, load_balancing=lb)).rows[0]
            rows.append(row)
            totals[lb] += row.goodput_rps
            line.append(f"{lb} {row.goodput_rps:.3f} rps / p90 {row.p90_e2e_ms:.0f} ms")
        print(f"seed {s}: " + ", ".join(line))
    m = {k: v / len(seeds) for k, v in totals.items()}
    print(f"mean goodput hints/post_hoc {m['hints'] / m['post_hoc_transfer']:.3f}  "
          f"hints/none {m['hints'] / m['none']:.3f}")
    write_rows(args.out, rows)


if __name__ == "__main__":
    main()
