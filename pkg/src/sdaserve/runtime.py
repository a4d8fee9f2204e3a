"""Simulated agent instances.

An :class:`AgentInstance` is a single server that alternates between three
kinds of activity: receive overhead (charged head-of-line per envelope),
prefill of one newly admitted work item, and a continuous-batching decode
step. The instance does not talk to the event kernel; the caller asks for
the next activity, schedules its completion, and hands the completion back.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from sdaserve.core import Granularity, GranularityKind, MessageEnvelope, Priority, Request, SimTime


class UnknownParameter(KeyError):
    pass


class ValueOutOfRange(ValueError):
    pass


class NoResidentCache(LookupError):
    pass


class TransferInFlight(RuntimeError):
    pass


# -- knobs -------------------------------------------------------------------

@dataclass(frozen=True)
class Admission:
    """``all`` or ``priority_at_least(level)``."""

    min_level: Optional[int] = None

    @classmethod
    def parse(cls, value) -> "Admission":
        if isinstance(value, Admission):
            return value
        text = str(value).strip()
        if text == "all":
            return cls()
        m = re.fullmatch(r"priority_at_least\(\s*(\d+)\s*\)", text)
        if not m:
            raise ValueOutOfRange(f"bad admission policy {value!r}")
        level = int(m.group(1))
        if not 0 <= level <= 7:
            raise ValueOutOfRange(f"admission level {level} outside [0, 7]")
        return cls(level)

    def admits(self, p: Priority) -> bool:
        return self.min_level is None or p.level >= self.min_level

    def __str__(self) -> str:
        return "all" if self.min_level is None else f"priority_at_least({self.min_level})"


def _coerce(value_type, value):
    if value_type is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise ValueOutOfRange(f"{value!r} is not an integer")
        return int(value)
    if value_type is float:
        return float(value)
    if value_type is Granularity:
        try:
            return Granularity.parse(value)
        except ValueError as e:
            raise ValueOutOfRange(str(e)) from None
    if value_type is Admission:
        return Admission.parse(value)
    if value_type is str:
        return None if value is None else str(value)
    return value


@dataclass(frozen=True)
class KnobSpec:
    name: str
    value_type: Any
    default: Any
    valid_range: Optional[Tuple[Any, Any]] = None
    applies_to: str = "serving"

    def coerce(self, value):
        v = _coerce(self.value_type, value)
        if self.valid_range is not None:
            lo, hi = self.valid_range
            if not lo <= v <= hi:
                raise ValueOutOfRange(f"{self.name}={v} outside [{lo}, {hi}]")
        return v


class KnobRegistry:
    """Advertised control parameters plus their current values."""

    def __init__(self, specs: Iterable[KnobSpec]):
        self.specs: Dict[str, KnobSpec] = {}
        self.values: Dict[str, Any] = {}
        for s in specs:
            if s.default is not None:
                s.coerce(s.default)
            self.specs[s.name] = s
            self.values[s.name] = s.default

    def spec(self, name: str) -> KnobSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise UnknownParameter(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self.specs

    def get(self, name: str):
        self.spec(name)
        return self.values[name]

    def set(self, name: str, value) -> Any:
        v = self.spec(name).coerce(value)
        self.values[name] = v
        return v

    def reset(self, name: str) -> Any:
        s = self.spec(name)
        self.values[name] = s.default
        return s.default

    def copy(self) -> "KnobRegistry":
        r = KnobRegistry(self.specs.values())
        r.values = dict(self.values)
        return r


def agent_knobs(max_num_seqs: int = 8, admission: str = "all") -> KnobRegistry:
    return KnobRegistry([
        KnobSpec("max_num_seqs", int, max_num_seqs, (1, 64)),
        KnobSpec("admission", Admission, Admission.parse(admission)),
        KnobSpec("kv_prefetch", str, None),
    ])


# -- cost model --------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    prefill_base_ms: float = 5.0
    prefill_per_token_ms: float = 0.05
    decode_step_base_ms: float = 15.0
    decode_step_per_seq_ms: float = 1.0
    envelope_overhead_ms: float = 1.0
    kv_transfer_per_token_ms: float = 0.02

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.decode_step_base_ms + self.decode_step_per_seq_ms <= 0:
            raise ValueError("decode step must take positive time")

    def prefill_ms(self, uncached_tokens: int) -> float:
        return self.prefill_base_ms + self.prefill_per_token_ms * uncached_tokens

    def step_ms(self, batch: int) -> float:
        return self.decode_step_base_ms + self.decode_step_per_seq_ms * batch

    def transfer_ms(self, context_tokens: int) -> float:
        return self.kv_transfer_per_token_ms * context_tokens


@dataclass(frozen=True)
class ServingParams:
    max_num_seqs: int = 8
    admission: str = "all"

    def __post_init__(self):
        if self.max_num_seqs < 1:
            raise ValueError("max_num_seqs must be >= 1")


# -- KV cache ----------------------------------------------------------------

@dataclass
class KvCacheEntry:
    session: str
    context_tokens: int
    resident_on: str


class KvFabric:
    """Cluster-wide view of KV residency and in-flight transfers.

    An entry lives on exactly one instance; during a transfer the source copy
    stays usable until completion, when it moves to the destination.
    """

    def __init__(self):
        self.instances: Dict[str, "AgentInstance"] = {}
        self.in_flight: Dict[str, Tuple[str, str, SimTime]] = {}
        self._waiters: Dict[str, List[Tuple["AgentInstance", "WorkItem"]]] = defaultdict(list)
        self.on_transfer_started: Optional[Callable[[str, SimTime], None]] = None
        self.transfers = 0

    def attach(self, inst: "AgentInstance") -> None:
        self.instances[inst.id] = inst
        inst.fabric = self

    def location(self, session: str) -> Optional[str]:
        for iid, inst in self.instances.items():
            if session in inst.kv:
                return iid
        return None

    def place(self, session: str, inst_id: str, context_tokens: int) -> None:
        """Make ``inst_id`` the only holder of the session (recompute path)."""
        for inst in self.instances.values():
            inst.kv.pop(session, None)
        self.instances[inst_id].kv[session] = KvCacheEntry(session, context_tokens, inst_id)

    def transfer(self, session: str, src: str, dst: str, now: SimTime) -> SimTime:
        entry = self.instances[src].kv.get(session)
        if entry is None:
            raise NoResidentCache(f"{session} not resident on {src}")
        if session in self.in_flight:
            raise TransferInFlight(session)
        if src == dst:
            return now
        done = now + self.instances[dst].cost.transfer_ms(entry.context_tokens)
        self.in_flight[session] = (src, dst, done)
        self.transfers += 1
        if self.on_transfer_started is not None:
            self.on_transfer_started(session, done)
        return done

    def complete(self, session: str, now: SimTime) -> List["AgentInstance"]:
        """Land a finished transfer; returns instances with unblocked work."""
        src, dst, _ = self.in_flight.pop(session)
        entry = self.instances[src].kv.pop(session, None)
        if entry is not None:
            entry.resident_on = dst
            self.instances[dst].kv[session] = entry
        woken = []
        for inst, item in self._waiters.pop(session, []):
            item.blocked = False
            if inst not in woken:
                woken.append(inst)
        return woken

    def wait_for(self, session: str, inst: "AgentInstance", item: "WorkItem") -> None:
        item.blocked = True
        self._waiters[session].append((inst, item))

    def apply_hint(self, session: str, dst: str, now: SimTime) -> Optional[SimTime]:
        """Start moving the session's cache towards ``dst`` ahead of the work."""
        src = self.location(session)
        if src is None:
            raise NoResidentCache(session)
        if session in self.in_flight:
            _, to, done = self.in_flight[session]
            return done if to == dst else None
        if src == dst:
            return now
        return self.transfer(session, src, dst, now)


def kv_transfer(session: str, src: "AgentInstance", dst: "AgentInstance", now: SimTime) -> SimTime:
    return src.fabric.transfer(session, src.id, dst.id, now)


def apply_hint(session: str, dst: "AgentInstance", now: SimTime) -> Optional[SimTime]:
    return dst.fabric.apply_hint(session, dst.id, now)


# -- work --------------------------------------------------------------------

@dataclass(eq=False)
class HopState:
    """One request's visit to one instance."""

    request: Request
    hop: int
    output_total: int
    expected_input: int
    context_tokens: int = 0
    boundaries: frozenset = frozenset()
    final_received: bool = False
    received: int = 0
    assigned: int = 0
    produced: int = 0
    open_items: int = 0
    stream_item: Optional["WorkItem"] = None
    first_token: Optional[SimTime] = None
    last_token: Optional[SimTime] = None
    completed: Optional[SimTime] = None

    @property
    def key(self) -> Tuple[int, int]:
        return (self.request.id, self.hop)


@dataclass(eq=False)
class WorkItem:
    hop: HopState
    prompt_tokens: int
    budget: int
    input_complete: bool
    order: int
    is_stream: bool = False
    admitted: bool = False
    produced: int = 0
    blocked: bool = False
    done: bool = False

    @property
    def priority(self) -> Priority:
        return self.hop.request.priority


@dataclass
class Activity:
    kind: str  # "rx" | "prefill" | "step"
    start: SimTime
    end: SimTime
    item: Optional[WorkItem] = None
    finalize: List[WorkItem] = field(default_factory=list)
    batch: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Emission:
    hop: HopState
    tokens: int
    boundary: bool = False
    complete: bool = False


@dataclass
class Outcome:
    emissions: List[Emission] = field(default_factory=list)
    completed: List[HopState] = field(default_factory=list)


def function_boundaries(output_total: int, functions: int) -> frozenset:
    functions = max(1, min(functions, output_total))
    return frozenset(round(k * output_total / functions) for k in range(1, functions + 1))


class AgentInstance:
    def __init__(self, id: str, role: str, cost: CostModel = CostModel(),
                 params: ServingParams = ServingParams(), knobs: Optional[KnobRegistry] = None,
                 metrics=None, kv_policy: str = "transfer"):
        self.id = id
        self.role = role
        self.cost = cost
        self.params = params
        self.knobs = knobs if knobs is not None else agent_knobs(params.max_num_seqs, params.admission)
        self.metrics = metrics
        self.kv: Dict[str, KvCacheEntry] = {}
        self.fabric: Optional[KvFabric] = None
        self.kv_policy = kv_policy  # "transfer" moves caches on a miss, "recompute" re-prefills
        self.queue: List[WorkItem] = []
        self.batch: List[WorkItem] = []
        self.busy: Optional[Activity] = None
        self.hops: Dict[Tuple[int, int], HopState] = {}
        self.pending_overhead = 0.0
        self._pending_finalize: List[WorkItem] = []
        self._prefilling = 0
        self._order = 0
        self.busy_total = 0.0
        self.envelopes_received = 0
        self.rx_overhead_total = 0.0
        self._last_busy_probe = (0.0, 0.0)
        self._by_rid: Dict[int, HopState] = {}

    # -- control surface ---------------------------------------------------

    def get(self, name: str):
        return self.knobs.get(name)

    def set(self, name: str, value, now: SimTime = 0.0) -> None:
        v = self.knobs.set(name, value)
        if name == "kv_prefetch" and v is not None and self.fabric is not None:
            self.fabric.apply_hint(v, self.id, now)

    def reset(self, name: str, now: SimTime = 0.0) -> None:
        self.knobs.reset(name)

    @property
    def max_num_seqs(self) -> int:
        return self.knobs.values["max_num_seqs"]

    @property
    def queue_depth(self) -> int:
        return len(self.queue) + len(self.batch) + self._prefilling

    def _record(self, name: str, value: float, now: SimTime) -> None:
        if self.metrics is not None:
            self.metrics.record(name, value, now)

    # -- intake ------------------------------------------------------------

    def _new_item(self, hop: HopState, prompt: int, budget: int, complete: bool, now: SimTime,
                  stream: bool = False) -> WorkItem:
        self._order += 1
        item = WorkItem(hop, prompt, budget, complete, self._order, is_stream=stream)
        hop.assigned += budget
        hop.open_items += 1
        self.queue.append(item)
        self._record("queue_depth", self.queue_depth, now)
        return item

    def expect(self, request: Request, hop: int, output_tokens: int, expected_input: int,
               context_tokens: int = 0, functions: int = 1) -> HopState:
        """Announce a request that will arrive over a link."""
        st = HopState(request, hop, output_tokens, expected_input, context_tokens,
                      function_boundaries(output_tokens, functions))
        self.hops[st.key] = st
        self._by_rid[request.id] = st
        return st

    def submit(self, request: Request, now: SimTime, hop: int = 0, output_tokens: Optional[int] = None,
               context_tokens: int = 0, functions: int = 1, new_tokens: Optional[int] = None) -> WorkItem:
        """Enqueue a request entering the pipeline at this instance (no envelope).

        ``new_tokens`` overrides the prompt size, e.g. 0 for work whose whole
        input is already the session context.
        """
        out = request.output_tokens if output_tokens is None else output_tokens
        prompt = request.prompt_tokens if new_tokens is None else new_tokens
        st = self.expect(request, hop, out, prompt, context_tokens, functions)
        st.final_received = True
        st.received = prompt
        return self._new_item(st, prompt, out, True, now)

    def on_envelope(self, env: MessageEnvelope, now: SimTime) -> None:
        if env.link[1] != self.id:
            raise ValueError(f"envelope for {env.link[1]} delivered to {self.id}")
        st = self._by_rid[env.request_id]
        self.envelopes_received += 1
        self.pending_overhead += self.cost.envelope_overhead_ms
        self.rx_overhead_total += self.cost.envelope_overhead_ms
        self._record("envelopes_received", 1.0, now)
        st.received += env.payload_tokens
        remaining = st.output_total - st.assigned
        si = st.stream_item
        if env.kind == GranularityKind.TOKEN_STREAM and si is not None and not si.input_complete:
            if si.admitted:
                # incremental prefill of the new chunk, no base cost
                self.pending_overhead += self.cost.prefill_per_token_ms * env.payload_tokens
            else:
                si.prompt_tokens += env.payload_tokens
        elif env.kind == GranularityKind.TOKEN_STREAM:
            st.stream_item = self._new_item(st, env.payload_tokens, remaining, env.is_final, now, stream=True)
        elif env.payload_tokens > 0 or remaining > 0:
            if env.is_final or env.kind == GranularityKind.BATCH_ALL:
                budget = remaining
            else:
                share = round(st.output_total * env.payload_tokens / max(1, st.expected_input))
                budget = min(remaining, max(1, share))
            self._new_item(st, env.payload_tokens, budget, True, now)
        if env.is_final:
            st.final_received = True
            si = st.stream_item
            if si is not None and not si.input_complete:
                if si.admitted:
                    self._pending_finalize.append(si)
                else:
                    si.input_complete = True
            # completion is checked once this envelope's overhead has been served
            self._pending_finalize.append(st)

    # -- scheduling ----------------------------------------------------------

    def _select(self, now: SimTime) -> Optional[WorkItem]:
        """Highest priority first, FIFO within a priority; skips parked items."""
        admission: Admission = self.knobs.values["admission"]
        while True:
            best = None
            for item in self.queue:
                if item.blocked or not admission.admits(item.priority):
                    continue
                if best is None or item.priority > best.priority:
                    best = item
            if best is None or not best.hop.context_tokens or self._ensure_kv(best, now):
                return best

    def _ensure_kv(self, item: WorkItem, now: SimTime) -> bool:
        """True if the item may be admitted now; otherwise it is parked."""
        session = item.hop.request.session_key
        fab = self.fabric
        if fab is None or session in self.kv:
            return True
        flight = fab.in_flight.get(session)
        if flight is not None:
            fab.wait_for(session, self, item)
            return False
        src = fab.location(session)
        if src is None or self.kv_policy == "recompute":
            return True
        fab.transfer(session, src, self.id, now)
        fab.wait_for(session, self, item)
        return False

    def next_activity(self, now: SimTime) -> Optional[Activity]:
        if self.busy is not None:
            return None
        act = None
        if self.pending_overhead > 0 or self._pending_finalize:
            act = Activity("rx", now, now + self.pending_overhead, finalize=self._pending_finalize)
            self.pending_overhead = 0.0
            self._pending_finalize = []
        elif len(self.batch) + self._prefilling < self.max_num_seqs and (item := self._select(now)):
            self.queue.remove(item)
            item.admitted = True
            self._prefilling += 1
            uncached = item.prompt_tokens
            if item.hop.context_tokens and item.hop.request.session_key not in self.kv:
                uncached += item.hop.context_tokens
            # fully cached input needs no prefill pass at all
            dur = self.cost.prefill_ms(uncached) if uncached > 0 else 0.0
            act = Activity("prefill", now, now + dur, item=item)
        elif self.batch:
            b = len(self.batch)
            act = Activity("step", now, now + self.cost.step_ms(b), batch=b)
            self._record("batch_size", b, now)
        if act is not None:
            self.busy = act
        return act

    def complete_activity(self, now: SimTime) -> Outcome:
        act = self.busy
        assert act is not None and act.end == now, "activity completion out of order"
        self.busy = None
        self.busy_total += act.duration
        out = Outcome()
        touched: List[HopState] = []
        if act.kind == "rx":
            for obj in act.finalize:
                if isinstance(obj, HopState):
                    touched.append(obj)
                else:
                    obj.input_complete = True
                    self._maybe_done(obj, now, touched)
        elif act.kind == "prefill":
            item = act.item
            self._prefilling -= 1
            if item.hop.context_tokens:
                session = item.hop.request.session_key
                if session not in self.kv and self.fabric is not None:
                    self.fabric.place(session, self.id, item.hop.context_tokens)
            if item.produced < item.budget:
                self.batch.append(item)
            else:
                self._maybe_done(item, now, touched)
            self._record("queue_depth", self.queue_depth, now)
        else:
            leaving = []
            for item in self.batch:
                item.produced += 1
                st = item.hop
                st.produced += 1
                if st.first_token is None:
                    st.first_token = now
                st.last_token = now
                out.emissions.append(Emission(st, 1, st.produced in st.boundaries))
                if item.produced >= item.budget:
                    leaving.append(item)
                touched.append(st)
            if leaving:
                self.batch = [i for i in self.batch if i.produced < i.budget]
                for item in leaving:
                    self._maybe_done(item, now, touched)
                self._record("queue_depth", self.queue_depth, now)
        seen = set()
        for st in touched:
            if id(st) in seen:
                continue
            seen.add(id(st))
            if st.completed is None and st.final_received and st.open_items == 0 and st.produced >= st.assigned:
                self._complete_hop(st, now, out)
        return out

    def _maybe_done(self, item: WorkItem, now: SimTime, touched: List[HopState]) -> None:
        if item.done or item.produced < item.budget or not item.input_complete:
            return
        item.done = True
        item.hop.open_items -= 1
        touched.append(item.hop)

    def _complete_hop(self, st: HopState, now: SimTime, out: Outcome) -> None:
        st.completed = now
        del self.hops[st.key]
        self._by_rid.pop(st.request.id, None)
        mine = [e for e in out.emissions if e.hop is st]
        if mine:
            mine[-1].complete = True
        else:
            out.emissions.append(Emission(st, 0, False, True))
        out.completed.append(st)
        if st.first_token is not None:
            self._record("ttft_ms", st.first_token - st.request.arrival, now)
            if st.produced > 1:
                self._record("tpt_ms", (st.last_token - st.first_token) / (st.produced - 1), now)

    # -- accounting ----------------------------------------------------------

    def busy_time_until(self, t: SimTime) -> float:
        total = self.busy_total
        if self.busy is not None and self.busy.start < t:
            total += min(t, self.busy.end) - self.busy.start
        return total

    def busy_fraction_since(self, t0: SimTime, t1: SimTime) -> float:
        """Busy share of (t0, t1]; call with consecutive windows."""
        if t1 <= t0:
            return 0.0
        now_busy = self.busy_time_until(t1)
        prev_t, prev_busy = self._last_busy_probe
        base = prev_busy if prev_t == t0 else self.busy_time_until(t0)
        self._last_busy_probe = (t1, now_busy)
        return min(1.0, max(0.0, (now_busy - base) / (t1 - t0)))

