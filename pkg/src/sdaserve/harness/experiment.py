"""Load sweeps, mode comparison and the analytic capacity bound."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

from sdaserve.core import Granularity, GranularityKind, Request
from sdaserve.harness.config import ExperimentConfig, PolicyConfig
from sdaserve.harness.pipeline import PipelineRun, RunResult
from sdaserve.harness.report import Report, ReportRow, summarize
from sdaserve.workload import WorkloadSpec, gen_arrivals

TIE_TOLERANCE = 0.01


def _mean_out(cfg: ExperimentConfig, role: str) -> float:
    chain = cfg.chain()
    if role == chain[0]:
        return cfg.output_tokens.mean
    return cfg.role(role).output_tokens.mean


def envelopes_per_request(mode: Granularity, tokens: float, functions: int) -> int:
    if mode.kind == GranularityKind.TOKEN_STREAM:
        return max(1, math.ceil(tokens / mode.chunk_tokens))
    if mode.kind == GranularityKind.PER_FUNCTION:
        return max(1, min(functions, math.ceil(tokens)))
    return 1


def role_busy_ms(cfg: ExperimentConfig, mode: Union[str, Granularity], role: str) -> float:
    """Busy time one mean-sized request costs an instance of ``role``.

    Decode steps are shared by a full batch; the entry role's request counts
    as one received envelope.
    """
    mode = Granularity.parse(mode)
    chain = cfg.chain()
    k = chain.index(role)
    c = cfg.cost_for(role)
    rc = cfg.role(role)
    if k == 0:
        prompt, envs = cfg.prompt_tokens.mean, 1
    else:
        prev = chain[k - 1]
        prompt = _mean_out(cfg, prev)
        envs = envelopes_per_request(mode, prompt, cfg.role(prev).functions)
    b = rc.max_num_seqs
    return c.prefill_ms(prompt) + _mean_out(cfg, role) * c.step_ms(b) / b + envs * c.envelope_overhead_ms


def compute_capacity(cfg: ExperimentConfig, mode: Union[str, Granularity] = "batch_all") -> float:
    """Requests/s the bottleneck role can sustain."""
    return min(cfg.role(r).replicas * 1000.0 / role_busy_ms(cfg, mode, r) for r in cfg.chain())


def workloads(cfg: ExperimentConfig) -> List[Tuple[str, Optional[WorkloadSpec]]]:
    """(label, spec) per load point; an explicit request list is a single point."""
    if cfg.requests is not None:
        return [("requests", None)]
    base = dict(duration=cfg.duration_ms, interactive_fraction=cfg.interactive_fraction,
                prompt_tokens_dist=cfg.prompt_tokens, output_tokens_dist=cfg.output_tokens,
                seed=cfg.seed, sessions=cfg.sessions, slo_ms=cfg.slo_ms, hops=tuple(cfg.chain()))
    if cfg.rates is not None:
        return [(f"{r:g}rps", WorkloadSpec(arrival_rate=r, **base)) for r in cfg.rates]
    cap = compute_capacity(cfg, "batch_all")
    return [(f"{x:g}x", WorkloadSpec(arrival_rate=x * cap, **base)) for x in cfg.load_points]


def requests_for(cfg: ExperimentConfig, spec: Optional[WorkloadSpec]) -> List[Request]:
    if spec is None:
        return sorted(cfg.requests or (), key=lambda r: (r.arrival, r.id))
    return gen_arrivals(spec)


def simulate(cfg: ExperimentConfig, policy: Union[str, PolicyConfig], spec: Optional[WorkloadSpec] = None,
             record_trace: bool = True) -> RunResult:
    if isinstance(policy, str):
        policy = cfg.policy(policy)
    return PipelineRun(cfg, policy, requests_for(cfg, spec), record_trace).run()


@dataclass
class Experiment:
    report: Report
    runs: Dict[Tuple[str, str], RunResult]


def run_experiment(cfg: ExperimentConfig, keep_runs: bool = False, record_trace: bool = False):
    """One simulation per (load point, policy); all policies share the arrival stream."""
    rows: List[ReportRow] = []
    runs: Dict[Tuple[str, str], RunResult] = {}
    for label, spec in workloads(cfg):
        for pol in cfg.policies:
            res = simulate(cfg, pol, spec, record_trace)
            rows.append(summarize(res, label, pol.name, cfg.seed, cfg.load_balancing))
            if keep_runs:
                runs[(label, pol.name)] = res
    report = Report(rows)
    return Experiment(report, runs) if keep_runs else report


def pick_winner(rows: List[ReportRow]) -> str:
    """Highest goodput; within the tie tolerance, lowest p90 latency."""
    best = max(r.goodput_rps for r in rows)
    tied = [r for r in rows if r.goodput_rps >= best * (1 - TIE_TOLERANCE)]
    return min(tied, key=lambda r: (r.p90_e2e_ms if r.p90_e2e_ms is not None else math.inf,
                                    -r.goodput_rps)).policy


def compare_modes(cfg: ExperimentConfig) -> Report:
    report = run_experiment(cfg)
    for lp in report.load_points():
        report.winners[lp] = pick_winner([r for r in report.rows if r.load_point == lp])
    return report
