"""Static communication modes across load points and seeds.

    python scripts/static_sweep.py [--config configs/default.json] [--seeds 1-10] [--out out/static.csv]
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
    ap.add_argument("--out", default="out/static.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    cfg = cfg.with_policies(*[p.name for p in cfg.policies if not p.adaptive])
    rows = []
    for s in parse_seeds(args.seeds):
        rep = run_experiment(replace(cfg, seed=s))
        rows += rep.rows
        for lp in rep.load_points():
            stream, batch = rep.row(lp, "token_stream"), rep.row(lp, "batch_all")
            print(f"seed {s} {lp:>5}: goodput batch/stream {batch.goodput_rps / stream.goodput_rps:.3f}  "
                  f"interactive p90 stream/batch "
                  f"{stream.p90_e2e_interactive_ms / batch.p90_e2e_interactive_ms:.3f}")
    write_rows(args.out, rows)


if __name__ == "__main__":
    main()
