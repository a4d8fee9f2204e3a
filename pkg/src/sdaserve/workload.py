"""Poisson workload generation with named, independent random substreams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from sdaserve.core import Priority, Request, SimTime


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one consumer; adding consumers never perturbs others."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


@dataclass(frozen=True)
class Fixed:
    n: int

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.n, dtype=np.int64)

    @property
    def mean(self) -> float:
        return float(self.n)


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(self.lo, self.hi, size=size, endpoint=True)

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2


SizeDist = Union[Fixed, Uniform]


def parse_dist(obj) -> SizeDist:
    """``{"fixed": n}``, ``{"uniform": [lo, hi]}`` or a bare int."""
    if isinstance(obj, (Fixed, Uniform)):
        return obj
    if isinstance(obj, int):
        return Fixed(obj)
    if isinstance(obj, dict) and len(obj) == 1:
        if "fixed" in obj:
            return Fixed(int(obj["fixed"]))
        if "uniform" in obj:
            lo, hi = obj["uniform"]
            return Uniform(int(lo), int(hi))
    raise ValueError(f"bad size distribution: {obj!r}")


@dataclass(frozen=True)
class WorkloadSpec:
    arrival_rate: float  # requests per second
    duration: SimTime  # ms
    interactive_fraction: float = 0.5
    prompt_tokens_dist: SizeDist = Uniform(64, 256)
    output_tokens_dist: SizeDist = Fixed(128)
    seed: int = 0
    sessions: Optional[int] = None
    slo_ms: Optional[float] = None
    hops: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not 0.0 <= self.interactive_fraction <= 1.0:
            raise ValueError("interactive_fraction must lie in [0, 1]")
        for d in (self.prompt_tokens_dist, self.output_tokens_dist):
            lo = d.n if isinstance(d, Fixed) else d.lo
            if lo < 1 or (isinstance(d, Uniform) and d.hi < d.lo):
                raise ValueError(f"bad size distribution {d}")
        if self.sessions is not None and self.sessions < 1:
            raise ValueError("sessions must be >= 1")

    def with_rate(self, rate: float) -> "WorkloadSpec":
        return replace(self, arrival_rate=rate)


def gen_arrivals(w: WorkloadSpec) -> List[Request]:
    mean_gap = 1000.0 / w.arrival_rate
    rng = substream(w.seed, "arrivals")
    times: List[float] = []
    t = 0.0
    block = max(16, int(w.duration / mean_gap * 1.2) + 16)
    while True:
        gaps = rng.exponential(mean_gap, size=block)
        done = False
        for g in gaps:
            t += float(g)
            if t >= w.duration:
                done = True
                break
            times.append(t)
        if done:
            break
    n = len(times)
    prompts = w.prompt_tokens_dist.draw(substream(w.seed, "prompt_sizes"), n)
    outputs = w.output_tokens_dist.draw(substream(w.seed, "output_sizes"), n)
    interactive = substream(w.seed, "priorities").random(n) < w.interactive_fraction
    if w.sessions is not None:
        sessions = substream(w.seed, "sessions").integers(0, w.sessions, size=n)
    out = []
    for i, t in enumerate(times):
        prio = Priority.interactive() if interactive[i] else Priority.background()
        deadline = t + w.slo_ms if w.slo_ms is not None else None
        session = f"s{int(sessions[i])}" if w.sessions is not None else None
        out.append(Request(i, t, prio, int(prompts[i]), int(outputs[i]), deadline, session, tuple(w.hops)))
    return out
