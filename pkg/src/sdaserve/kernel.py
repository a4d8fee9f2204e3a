"""Deterministic discrete-event kernel."""

from __future__ import annotations

import csv
import enum
import hashlib
import heapq
import io
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from sdaserve.core import SimTime


class TimeInPast(ValueError):
    pass


class EventKind(str, enum.Enum):
    REQUEST_ARRIVAL = "request_arrival"
    ENVELOPE_ARRIVAL = "envelope_arrival"
    BATCH_STEP_COMPLETE = "batch_step_complete"
    PREFILL_COMPLETE = "prefill_complete"
    CONTROLLER_TICK = "controller_tick"
    METRIC_POLL = "metric_poll"
    KV_TRANSFER_COMPLETE = "kv_transfer_complete"
    HINT_DELIVERY = "hint_delivery"


@dataclass(order=True)
class Event:
    time: SimTime
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)
    request_id: Optional[int] = field(default=None, compare=False)
    agent_id: str = field(default="", compare=False)
    detail: str = field(default="", compare=False)


TRACE_COLUMNS = ("time_ms", "seq", "kind", "request_id", "agent_id", "detail")


class EventTrace(list):
    """Ordered log of dispatched events."""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for e in self:
            w.writerow(
                (repr(float(e.time)), e.seq, e.kind.value,
                 "" if e.request_id is None else e.request_id, e.agent_id, e.detail)
            )
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


Handler = Callable[[Event], None]


class Simulator:
    """Single-threaded event loop ordered by (time, seq)."""

    def __init__(self, record_trace: bool = True):
        self.now: SimTime = 0.0
        self._queue: List[Event] = []
        self._seq = itertools.count()
        self._handlers: Dict[EventKind, Handler] = {}
        self.record_trace = record_trace
        self.trace = EventTrace()
        self._stopped = False

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[EventKind(kind)] = handler

    def schedule(self, time: SimTime, kind: EventKind, payload: Any = None, *,
                 request_id: Optional[int] = None, agent_id: str = "", detail: str = "") -> Event:
        if time < self.now:
            raise TimeInPast(f"event at {time} before now={self.now}")
        e = Event(float(time), next(self._seq), EventKind(kind), payload, request_id, agent_id, detail)
        heapq.heappush(self._queue, e)
        return e

    def stop(self) -> None:
        """Halt the current run_until after the event being dispatched."""
        self._stopped = True

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, t_end: SimTime) -> EventTrace:
        if t_end < self.now:
            raise TimeInPast(f"t_end={t_end} before now={self.now}")
        dispatched = EventTrace()
        q = self._queue
        self._stopped = False
        while q and q[0].time <= t_end:
            e = heapq.heappop(q)
            self.now = e.time
            dispatched.append(e)
            handler = self._handlers.get(e.kind)
            if handler is not None:
                handler(e)
            if self._stopped:
                break
        else:
            self.now = t_end
        if self.record_trace:
            self.trace.extend(dispatched)
        return dispatched
