from __future__ import annotations

from pathlib import Path
from typing import List

from sdaserve.harness.report import rows_to_csv


def parse_seeds(text: str) -> List[int]:
    """Seeds written as "1-10" or "1,3,5"."""
    if "-" in text:
        a, b = text.split("-")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def write_rows(path: str, rows) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(rows_to_csv(rows))
    print(f"wrote {p} ({len(rows)} rows)")
