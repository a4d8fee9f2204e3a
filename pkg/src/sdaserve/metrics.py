"""Two-tier telemetry: per-node collectors and a central poller."""

from __future__ import annotations

import enum
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from sdaserve.core import SimTime

DEFAULT_CAPACITY = 65536


class UnknownMetric(KeyError):
    pass


class EmptyInput(ValueError):
    pass


class UnknownCustomAggregation(KeyError):
    pass


class DuplicateName(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class Direction(str, enum.Enum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"
    NEUTRAL = "neutral"


BUILTIN_KINDS = ("mean", "max", "min", "sum", "count", "last", "p50", "p90", "p99")
_PCT = re.compile(r"^p(\d{1,2})$")
_CUSTOM = re.compile(r"^custom\((.+)\)$")


@dataclass(frozen=True)
class AggregationKind:
    """A built-in kind name, or ``custom(<name>)`` resolved through a table."""

    name: str

    @classmethod
    def parse(cls, text: Union[str, "AggregationKind"]) -> "AggregationKind":
        if isinstance(text, AggregationKind):
            return text
        text = str(text).strip()
        if text in BUILTIN_KINDS or _CUSTOM.match(text):
            return cls(text)
        raise ValueError(f"unknown aggregation kind {text!r}")

    @property
    def custom_name(self) -> Optional[str]:
        m = _CUSTOM.match(self.name)
        return m.group(1) if m else None

    def __str__(self) -> str:
        return self.name


_custom_aggregations: Dict[str, Callable[[Sequence[float]], float]] = {}


def register_aggregation(name: str, fn: Callable[[Sequence[float]], float]) -> None:
    _custom_aggregations[name] = fn


def nearest_rank(values: Sequence[float], pct: int) -> float:
    """The ceil(pct/100 * n)-th smallest value (1-based)."""
    ordered = sorted(values)
    n = len(ordered)
    rank = max(1, -(-pct * n // 100))
    return ordered[rank - 1]


def aggregate(samples: Sequence[float], kind: Union[str, AggregationKind],
              custom: Optional[Mapping[str, Callable]] = None) -> float:
    """Reduce time-ordered sample values; ``last`` is the most recent one."""
    kind = AggregationKind.parse(kind)
    cname = kind.custom_name
    if cname is not None:
        table = _custom_aggregations if custom is None else {**_custom_aggregations, **custom}
        if cname not in table:
            raise UnknownCustomAggregation(cname)
        if not samples:
            raise EmptyInput(kind.name)
        return table[cname](list(samples))
    if not samples:
        raise EmptyInput(kind.name)
    k = kind.name
    if k == "mean":
        return math.fsum(samples) / len(samples)
    if k == "max":
        return max(samples)
    if k == "min":
        return min(samples)
    if k == "sum":
        return math.fsum(samples)
    if k == "count":
        return float(len(samples))
    if k == "last":
        return samples[-1]
    return nearest_rank(samples, int(_PCT.match(k).group(1)))


@dataclass(frozen=True)
class MetricDescriptor:
    name: str
    unit: str
    direction: Direction
    default_aggregation: AggregationKind
    source: str = "system"
    description: str = ""


@dataclass(frozen=True)
class MetricSample:
    name: str
    node: str
    time: SimTime
    value: float


_REQUIRED = ("name", "unit", "direction", "default_aggregation", "source", "description")


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def load_descriptors(text: str) -> List[MetricDescriptor]:
    """Parse a JSON array of descriptor objects; every key is required, none extra."""
    dec = json.JSONDecoder()
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.msg) from None
    pos = len(text) - len(text.lstrip())
    if not text[pos:pos + 1] == "[":
        raise ParseError(_line_of(text, pos), "expected a JSON array of descriptors")
    pos += 1
    out: List[MetricDescriptor] = []
    seen = set()
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if text[pos] == "]":
            break
        start = pos
        obj, pos = dec.raw_decode(text, pos)
        line = _line_of(text, start)
        if not isinstance(obj, dict):
            raise ParseError(line, "descriptor must be an object")
        missing = [k for k in _REQUIRED if k not in obj]
        if missing:
            raise ParseError(line, f"missing field(s): {', '.join(missing)}")
        extra = sorted(set(obj) - set(_REQUIRED))
        if extra:
            raise ParseError(line, f"unknown field(s): {', '.join(extra)}")
        try:
            d = MetricDescriptor(
                str(obj["name"]), str(obj["unit"]), Direction(obj["direction"]),
                AggregationKind.parse(obj["default_aggregation"]),
                str(obj["source"]), str(obj["description"]),
            )
        except ValueError as e:
            raise ParseError(line, str(e)) from None
        if d.source not in ("system", "application"):
            raise ParseError(line, f"source must be system or application, got {d.source!r}")
        if d.name in seen:
            raise DuplicateName(d.name)
        seen.add(d.name)
        out.append(d)
    return out


def builtin_descriptors() -> List[MetricDescriptor]:
    text = resources.files("sdaserve").joinpath("builtin_metrics.json").read_text()
    return load_descriptors(text)


class LocalCollector:
    """Per-node ring buffers, one per registered metric."""

    def __init__(self, node: str, descriptors: Iterable[MetricDescriptor] = (),
                 capacity: int = DEFAULT_CAPACITY):
        self.node = node
        self.capacity = capacity
        self.descriptors: Dict[str, MetricDescriptor] = {}
        self._buf: Dict[str, deque] = {}
        for d in descriptors:
            self.register(d)

    def register(self, d: MetricDescriptor) -> None:
        if d.name in self.descriptors:
            raise DuplicateName(d.name)
        self.descriptors[d.name] = d
        self._buf[d.name] = deque(maxlen=self.capacity)

    def record(self, name: str, value: float, now: SimTime) -> None:
        buf = self._buf.get(name)
        if buf is None:
            raise UnknownMetric(f"{name} on {self.node}")
        buf.append((now, value))

    def window(self, name: str, window_ms: float, now: SimTime) -> List[float]:
        """Values with time in (now - window_ms, now], oldest first."""
        buf = self._buf.get(name)
        if buf is None:
            raise UnknownMetric(f"{name} on {self.node}")
        lo = now - window_ms
        vals = []
        for t, v in reversed(buf):
            if t <= lo:
                break
            if t <= now:
                vals.append(v)
        vals.reverse()
        return vals

    def samples(self, name: str) -> List[MetricSample]:
        return [MetricSample(name, self.node, t, v) for t, v in self._buf[name]]


@dataclass
class Snapshot:
    poll_time: SimTime
    window_ms: float
    entries: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def get(self, node: str, name: str) -> Optional[float]:
        return self.entries.get((node, name))


class MetricsPlane:
    """Central poller over all local collectors."""

    def __init__(self, custom: Optional[Mapping[str, Callable]] = None):
        self.collectors: Dict[str, LocalCollector] = {}
        self.custom = dict(custom or {})

    def add_node(self, node: str, descriptors: Optional[Iterable[MetricDescriptor]] = None,
                 capacity: int = DEFAULT_CAPACITY) -> LocalCollector:
        if descriptors is None:
            descriptors = builtin_descriptors()
        c = self.collectors[node] = LocalCollector(node, descriptors, capacity)
        return c

    def record(self, node: str, name: str, value: float, now: SimTime) -> None:
        self.collectors[node].record(name, value, now)

    def poll(self, nodes: Optional[Iterable[str]], names: Iterable[str], window_ms: float, now: SimTime,
             aggregation: Optional[Union[str, AggregationKind]] = None) -> Snapshot:
        if not window_ms > 0:
            raise ValueError("window_ms must be > 0")
        nodes = list(self.collectors) if nodes is None else list(nodes)
        names = list(names)
        snap = Snapshot(now, window_ms)
        for node in nodes:
            c = self.collectors[node]
            for name in names:
                if name not in c.descriptors:
                    continue
                vals = c.window(name, window_ms, now)
                if not vals:
                    continue
                kind = aggregation if aggregation is not None else c.descriptors[name].default_aggregation
                snap.entries[(node, name)] = aggregate(vals, kind, self.custom)
        return snap
