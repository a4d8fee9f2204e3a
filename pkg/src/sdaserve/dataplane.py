"""Per-link communication shim.

Senders push produced tokens with :meth:`Shim.offer_tokens`; the link's
current :class:`Granularity` decides when tokens are cut into envelopes.
:meth:`Shim.dispatch` drains ready envelopes in priority order, honouring
the pacing gap, and returns their arrival times at the destination.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from sdaserve.core import Granularity, GranularityKind, InvalidField, MessageEnvelope, Priority, SimTime
from sdaserve.runtime import KnobRegistry, KnobSpec, UnknownParameter


class UnknownLink(KeyError):
    pass


class InvalidGranularity(ValueError):
    pass


def link_id(src: str, dst: str) -> str:
    return f"{src}->{dst}"


def link_knobs(mode: Granularity, chunk_tokens: int = 16, pacing_gap: float = 0.0) -> KnobRegistry:
    return KnobRegistry([
        KnobSpec("comm_mode", Granularity, mode, None, "dataplane"),
        KnobSpec("chunk_tokens", int, chunk_tokens, (1, 1 << 20), "dataplane"),
        KnobSpec("pacing_gap", float, pacing_gap, (0.0, float("inf")), "dataplane"),
    ])


@dataclass
class _Accum:
    tokens: int = 0
    seq: int = 0
    priority: Priority = field(default_factory=Priority)
    complete: bool = False
    final_sent: bool = False


@dataclass
class Link:
    source: str
    destination: str
    mode: Granularity = field(default_factory=Granularity.batch_all)
    pacing_gap: float = 0.0
    network_delay: float = 1.0
    knobs: Optional[KnobRegistry] = None

    def __post_init__(self):
        if self.pacing_gap < 0 or self.network_delay < 0:
            raise ValueError("pacing_gap and network_delay must be >= 0")
        if self.knobs is None:
            self.knobs = link_knobs(self.mode, self.mode.chunk_tokens, self.pacing_gap)
        self._accum: Dict[int, _Accum] = {}
        self._ready: List[Tuple[tuple, int, MessageEnvelope]] = []
        self._fifo = itertools.count()
        self._last_emit: Optional[float] = None
        self.emitted_tokens = 0
        self.mode_changes: List[Tuple[SimTime, Granularity]] = []

    @property
    def id(self) -> str:
        return link_id(self.source, self.destination)

    def buffered_tokens(self, request_id: int) -> int:
        a = self._accum.get(request_id)
        return a.tokens if a else 0

    def ready_count(self) -> int:
        return len(self._ready)


class Shim:
    """Owns every link of a deployment."""

    def __init__(self):
        self.links: Dict[str, Link] = {}
        self._env_ids = itertools.count()

    def add_link(self, link: Link) -> Link:
        self.links[link.id] = link
        return link

    def link(self, lid: str) -> Link:
        try:
            return self.links[lid]
        except KeyError:
            raise UnknownLink(lid) from None

    # -- envelope cutting -------------------------------------------------

    def _cut(self, link: Link, rid: int, acc: _Accum, n: int, final: bool, now: SimTime) -> MessageEnvelope:
        env = MessageEnvelope(
            id=next(self._env_ids), request_id=rid, link=(link.source, link.destination),
            payload_tokens=n, seq=acc.seq, is_final=final, priority=acc.priority,
            created=now, kind=link.mode.kind,
        )
        acc.seq += 1
        acc.tokens -= n
        if final:
            acc.final_sent = True
        heapq.heappush(link._ready, ((-acc.priority.klass, -acc.priority.level), next(link._fifo), env))
        return env

    def _drain(self, link: Link, rid: int, acc: _Accum, boundary: bool, now: SimTime) -> List[MessageEnvelope]:
        out: List[MessageEnvelope] = []
        kind = link.mode.kind
        if kind == GranularityKind.TOKEN_STREAM:
            c = link.mode.chunk_tokens
            while acc.tokens >= c and not (acc.complete and acc.tokens == c):
                out.append(self._cut(link, rid, acc, c, False, now))
            if acc.complete:
                while acc.tokens > c:
                    out.append(self._cut(link, rid, acc, c, False, now))
                out.append(self._cut(link, rid, acc, acc.tokens, True, now))
        elif kind == GranularityKind.PER_FUNCTION:
            if acc.complete:
                out.append(self._cut(link, rid, acc, acc.tokens, True, now))
            elif boundary and acc.tokens > 0:
                out.append(self._cut(link, rid, acc, acc.tokens, False, now))
        elif acc.complete:
            out.append(self._cut(link, rid, acc, acc.tokens, True, now))
        if acc.final_sent:
            del link._accum[rid]
        return out

    def offer_tokens(self, lid: str, request_id: int, n_tokens: int, is_request_complete: bool = False,
                     *, boundary: bool = False, priority: Optional[Priority] = None,
                     now: SimTime = 0.0) -> List[MessageEnvelope]:
        """Buffer ``n_tokens`` produced for ``request_id`` and cut whatever the mode allows.

        ``boundary`` marks the end of a function in the sender's output.
        """
        link = self.link(lid)
        if n_tokens < 0:
            raise ValueError("n_tokens must be >= 0")
        acc = link._accum.get(request_id)
        if acc is None:
            acc = link._accum[request_id] = _Accum(priority=priority or Priority())
        if acc.complete:
            raise ValueError(f"request {request_id} already completed on {lid}")
        acc.tokens += n_tokens
        acc.complete = bool(is_request_complete)
        return self._drain(link, request_id, acc, boundary, now)

    def set_mode(self, lid: str, g, now: SimTime = 0.0) -> List[MessageEnvelope]:
        """Rebind buffered tokens to a new granularity; in-flight envelopes are untouched."""
        link = self.link(lid)
        try:
            g = Granularity.parse(g)
        except InvalidField as e:
            raise InvalidGranularity(str(e)) from None
        if g.kind == GranularityKind.TOKEN_STREAM and g.chunk_tokens < 1:
            raise InvalidGranularity("chunk_tokens < 1")
        if g != link.mode:
            link.mode_changes.append((now, g))
        link.mode = g
        link.knobs.values["comm_mode"] = g
        link.knobs.values["chunk_tokens"] = g.chunk_tokens
        out: List[MessageEnvelope] = []
        for rid, acc in list(link._accum.items()):
            out.extend(self._drain(link, rid, acc, False, now))
        return out

    # -- controller surface -----------------------------------------------

    def set(self, lid: str, name: str, value, now: SimTime = 0.0) -> None:
        link = self.link(lid)
        spec = link.knobs.spec(name)
        value = spec.coerce(value)
        if name == "comm_mode":
            self.set_mode(lid, value, now)
        elif name == "chunk_tokens":
            if link.mode.kind == GranularityKind.TOKEN_STREAM:
                self.set_mode(lid, Granularity.token_stream(value), now)
            else:
                link.knobs.values[name] = value
        elif name == "pacing_gap":
            link.knobs.values[name] = value
            link.pacing_gap = value
        else:  # pragma: no cover - registry only holds the three knobs
            raise UnknownParameter(name)

    def reset(self, lid: str, name: str, now: SimTime = 0.0) -> None:
        link = self.link(lid)
        self.set(lid, name, link.knobs.spec(name).default, now)

    # -- transmission -----------------------------------------------------

    def dispatch(self, lid: str, now: SimTime) -> List[Tuple[MessageEnvelope, SimTime]]:
        link = self.link(lid)
        out = []
        while link._ready:
            _, _, env = heapq.heappop(link._ready)
            t = now if link._last_emit is None else max(now, link._last_emit + link.pacing_gap)
            link._last_emit = t
            link.emitted_tokens += env.payload_tokens
            out.append((env, t + link.network_delay))
        return out
