"""Per-(load point, policy) report rows and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

from sdaserve.harness.pipeline import RunResult
from sdaserve.metrics import nearest_rank


@dataclass
class ReportRow:
    load_point: str
    policy: str
    seed: int
    load_balancing: str
    offered: int
    completed: int
    incomplete: int
    offered_rps: float
    goodput_rps: float
    token_throughput: float
    mean_e2e_ms: Optional[float]
    p90_e2e_ms: Optional[float]
    mean_e2e_interactive_ms: Optional[float]
    p90_e2e_interactive_ms: Optional[float]
    mean_ttft_final_ms: Optional[float]
    slo_violation_fraction: float
    mode_switches: int
    mode_switches_by_link: str = ""
    kv_transfers: int = 0


_TYPES = {f.name: f.type for f in fields(ReportRow)}


def _mean(xs: Sequence[float]) -> Optional[float]:
    return math.fsum(xs) / len(xs) if xs else None


def _p90(xs: Sequence[float]) -> Optional[float]:
    return nearest_rank(xs, 90) if xs else None


def summarize(res: RunResult, load_point: str, policy: str, seed: int, lb: str) -> ReportRow:
    recs = res.requests
    done = [r for r in recs if r.completed is not None]
    last = max((r.completed for r in done), default=0.0)
    span_s = max(res.duration_ms, last) / 1000.0
    e2e = [r.e2e for r in done]
    inter = [r.e2e for r in done if r.request.priority.is_interactive]
    ttft = [r.final_ttft for r in done if r.final_ttft is not None]
    with_slo = [r for r in recs if r.request.slo_deadline is not None]
    violated = sum(1 for r in with_slo if r.completed is None or r.completed > r.request.slo_deadline)
    tokens = sum(sum(r.hop_outputs) for r in done)
    by_link = "|".join(f"{k}:{v}" for k, v in sorted(res.mode_switches.items()))
    return ReportRow(
        load_point=load_point, policy=policy, seed=seed, load_balancing=lb,
        offered=len(recs), completed=len(done), incomplete=len(recs) - len(done),
        offered_rps=len(recs) / (res.duration_ms / 1000.0),
        goodput_rps=len(done) / span_s,
        token_throughput=tokens / span_s,
        mean_e2e_ms=_mean(e2e), p90_e2e_ms=_p90(e2e),
        mean_e2e_interactive_ms=_mean(inter), p90_e2e_interactive_ms=_p90(inter),
        mean_ttft_final_ms=_mean(ttft),
        slo_violation_fraction=violated / len(recs) if recs else 0.0,
        mode_switches=sum(res.mode_switches.values()), mode_switches_by_link=by_link,
        kv_transfers=res.kv_transfers,
    )


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)
    winners: Dict[str, str] = field(default_factory=dict)

    def row(self, load_point: str, policy: str) -> ReportRow:
        for r in self.rows:
            if r.load_point == load_point and r.policy == policy:
                return r
        raise KeyError((load_point, policy))

    def load_points(self) -> List[str]:
        seen: List[str] = []
        for r in self.rows:
            if r.load_point not in seen:
                seen.append(r.load_point)
        return seen

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    @classmethod
    def from_csv(cls, text: str) -> "Report":
        return cls(rows_from_csv(text))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(ReportRow)]
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()


def _parse(name: str, text: str):
    t = _TYPES[name]
    if text == "" and "Optional" in t:
        return None
    if "float" in t:
        return float(text)
    if t == "int":
        return int(text)
    return text


def rows_from_csv(text: str) -> List[ReportRow]:
    rd = csv.DictReader(io.StringIO(text))
    return [ReportRow(**{k: _parse(k, v) for k, v in rec.items()}) for rec in rd]
