"""Wires kernel, shim, instances, telemetry and controller into one simulation run."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from sdaserve.control import (
    ControlAction, Controller, agent_target, compile_intent, link_target,
)
from sdaserve.core import Request, SimTime
from sdaserve.dataplane import Link, Shim, link_id, link_knobs
from sdaserve.harness.config import ExperimentConfig, PolicyConfig
from sdaserve.kernel import Event, EventKind, EventTrace, Simulator
from sdaserve.metrics import MetricsPlane
from sdaserve.runtime import AgentInstance, KvFabric, NoResidentCache, ServingParams, agent_knobs
from sdaserve.workload import substream

# delay between a routing decision and the hint reaching the destination
HINT_DELAY_MS = 1.0


@dataclass
class RequestRecord:
    request: Request
    path: List[str] = field(default_factory=list)
    hop_outputs: List[int] = field(default_factory=list)
    started: Optional[SimTime] = None
    completed: Optional[SimTime] = None
    final_ttft: Optional[SimTime] = None

    @property
    def e2e(self) -> Optional[float]:
        return None if self.completed is None else self.completed - self.request.arrival


@dataclass
class RunResult:
    requests: List[RequestRecord]
    duration_ms: float
    end_ms: float
    mode_switches: Dict[str, int]
    trace: EventTrace
    kv_transfers: int = 0


class PipelineRun:
    """One (workload, policy) simulation of a chain pipeline."""

    def __init__(self, cfg: ExperimentConfig, policy: PolicyConfig, requests: Sequence[Request],
                 record_trace: bool = True):
        self.cfg = cfg
        self.policy = policy
        self.chain = cfg.chain()
        self.sim = Simulator(record_trace)
        self.plane = MetricsPlane()
        self.fabric = KvFabric()
        self.shim = Shim()
        lb = cfg.load_balancing
        self.controller = Controller(default_selector="kv_affinity" if lb == "none" else "least_queue_depth",
                                     hints=lb == "hints")
        self.instances: Dict[str, AgentInstance] = {}
        for role in self.chain:
            rc = cfg.role(role)
            ids = cfg.instance_ids(role)
            for iid in ids:
                inst = AgentInstance(
                    iid, role, cfg.cost_for(role), ServingParams(rc.max_num_seqs, rc.admission),
                    agent_knobs(rc.max_num_seqs, rc.admission), self.plane.add_node(iid),
                    kv_policy="recompute" if lb == "none" else "transfer",
                )
                self.fabric.attach(inst)
                self.instances[iid] = inst
                self.controller.register_agent(agent_target(iid), inst.knobs)
            self.controller.register_role(role, ids)
        self.fabric.on_transfer_started = self._on_transfer_started
        inst_links: List[Tuple[str, str]] = []
        for a, b in zip(self.chain, self.chain[1:]):
            lc = cfg.link_between(a, b)
            for src in cfg.instance_ids(a):
                for dst in cfg.instance_ids(b):
                    mode = policy.start_mode
                    link = self.shim.add_link(Link(src, dst, mode, lc.pacing_gap_ms, lc.network_delay_ms,
                                                   link_knobs(mode, mode.chunk_tokens, lc.pacing_gap_ms)))
                    self.controller.register_agent(link_target(src, dst), link.knobs)
                    inst_links.append((src, dst))
        if policy.intent is not None:
            self.controller.install(compile_intent(policy.intent, inst_links, policy.dwell_ms))
        if cfg.kv.prewarm_on is not None:
            inst = self.instances[cfg.kv.prewarm_on]
            ctx = cfg.role(inst.role).context_tokens
            for s in sorted({r.session for r in requests if r.session is not None}):
                self.fabric.place(s, inst.id, ctx)

        # per-hop output sizes come from their own substreams so policies never perturb them
        self.records: Dict[int, RequestRecord] = {}
        extra = {}
        for role in self.chain[1:]:
            dist = cfg.role(role).output_tokens
            extra[role] = dist.draw(substream(cfg.seed, f"hop_output:{role}"), len(requests))
        for i, r in enumerate(requests):
            outs = [r.output_tokens] + [int(extra[role][i]) for role in self.chain[1:]]
            self.records[r.id] = RequestRecord(r, hop_outputs=outs)
        self.requests = list(requests)
        self.open = len(self.requests)
        self._last_arrival = max((r.arrival for r in self.requests), default=0.0)
        self.duration = cfg.duration_ms
        self.t_end = cfg.duration_ms + cfg.drain_ms
        self._last_poll = 0.0

        s = self.sim
        s.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        s.on(EventKind.ENVELOPE_ARRIVAL, self._on_envelope)
        s.on(EventKind.PREFILL_COMPLETE, self._on_activity)
        s.on(EventKind.BATCH_STEP_COMPLETE, self._on_activity)
        s.on(EventKind.METRIC_POLL, self._on_poll)
        s.on(EventKind.CONTROLLER_TICK, self._on_tick)
        s.on(EventKind.KV_TRANSFER_COMPLETE, self._on_transfer_complete)
        s.on(EventKind.HINT_DELIVERY, self._on_hint)

    # -- driving -----------------------------------------------------------

    def run(self) -> RunResult:
        for r in self.requests:
            self.sim.schedule(r.arrival, EventKind.REQUEST_ARRIVAL, r, request_id=r.id)
        if self.requests:
            self.sim.schedule(self.cfg.poll_ms, EventKind.METRIC_POLL)
            self.sim.schedule(self.cfg.tick_ms, EventKind.CONTROLLER_TICK)
        self.sim.run_until(self.t_end)
        switches = {}
        for lid, link in self.shim.links.items():
            switches[lid] = len(link.mode_changes)
        return RunResult(list(self.records.values()), self.duration, self.t_end, switches,
                         self.sim.trace, self.fabric.transfers)

    def _kick(self, inst: AgentInstance) -> None:
        act = inst.next_activity(self.sim.now)
        if act is None:
            return
        kind = EventKind.BATCH_STEP_COMPLETE if act.kind == "step" else EventKind.PREFILL_COMPLETE
        rid = act.item.hop.request.id if act.item is not None else None
        detail = act.kind if act.kind != "step" else f"step b={act.batch}"
        self.sim.schedule(act.end, kind, inst, request_id=rid, agent_id=inst.id, detail=detail)

    def _session_at(self, r: Request, role: str) -> Optional[str]:
        if self.cfg.role(role).context_tokens and r.session is not None:
            return r.session
        return None

    def _start(self, r: Request) -> None:
        now = self.sim.now
        rec = self.records[r.id]
        rec.started = now
        for role in self.chain:
            sess = self._session_at(r, role)
            d = self.controller.route(r, role, kv_session=sess)
            rec.path.append(d.instance)
            if d.hint is not None:
                self.sim.schedule(now + HINT_DELAY_MS, EventKind.HINT_DELIVERY, d.hint,
                                  request_id=r.id, agent_id=d.instance, detail=str(d.hint))
        for hop, iid in enumerate(rec.path):
            inst = self.instances[iid]
            role = self.chain[hop]
            rc = self.cfg.role(role)
            ctx = rc.context_tokens if self._session_at(r, role) else 0
            if hop == 0:
                inst.submit(r, now, 0, rec.hop_outputs[0], ctx, rc.functions)
            else:
                inst.expect(r, hop, rec.hop_outputs[hop], rec.hop_outputs[hop - 1], ctx, rc.functions)
        self._kick(self.instances[rec.path[0]])

    # -- handlers ------------------------------------------------------------

    def _on_arrival(self, e: Event) -> None:
        r, blocked = self.controller.admit(e.payload, self.chain[0])
        if blocked is None:
            self._start(r)

    def _send(self, lid: str) -> None:
        for env, t in self.shim.dispatch(lid, self.sim.now):
            detail = f"{lid} seq={env.seq} n={env.payload_tokens}" + (" final" if env.is_final else "")
            self.sim.schedule(t, EventKind.ENVELOPE_ARRIVAL, env, request_id=env.request_id,
                              agent_id=env.link[1], detail=detail)

    def _on_envelope(self, e: Event) -> None:
        inst = self.instances[e.agent_id]
        inst.on_envelope(e.payload, self.sim.now)
        if inst.busy is None:
            self._kick(inst)

    def _on_activity(self, e: Event) -> None:
        inst: AgentInstance = e.payload
        now = self.sim.now
        out = inst.complete_activity(now)
        touched = set()
        for em in out.emissions:
            st = em.hop
            rec = self.records[st.request.id]
            if st.hop + 1 >= len(rec.path):
                continue
            lid = link_id(inst.id, rec.path[st.hop + 1])
            self.shim.offer_tokens(lid, st.request.id, em.tokens, em.complete, boundary=em.boundary,
                                   priority=st.request.priority, now=now)
            touched.add(lid)
        for lid in sorted(touched):
            self._send(lid)
        for st in out.completed:
            rec = self.records[st.request.id]
            if st.hop == len(rec.path) - 1:
                self._finish(rec, st, inst)
        self._kick(inst)

    def _finish(self, rec: RequestRecord, st, inst: AgentInstance) -> None:
        now = self.sim.now
        rec.completed = now
        rec.final_ttft = None if st.first_token is None else st.first_token - rec.request.arrival
        inst.metrics.record("e2e_latency_ms", rec.e2e, now)
        if rec.request.priority.is_interactive:
            inst.metrics.record("e2e_latency_interactive_ms", rec.e2e, now)
        self.open -= 1

    def _on_poll(self, e: Event) -> None:
        now = self.sim.now
        for inst in self.instances.values():
            inst.metrics.record("server_busy_fraction", inst.busy_fraction_since(self._last_poll, now), now)
        self._last_poll = now
        residency = {}
        for iid, inst in self.instances.items():
            for s in inst.kv:
                residency[s] = iid
        self.controller.refresh(self.plane, now, residency)
        if self._active(now + self.cfg.poll_ms):
            self.sim.schedule(now + self.cfg.poll_ms, EventKind.METRIC_POLL)

    def _active(self, t: SimTime) -> bool:
        return t <= self.t_end and (self.open > 0 or t <= self._last_arrival)

    def _apply(self, a: ControlAction) -> None:
        now = self.sim.now
        kind, _, name = a.target.partition(":")
        if kind == "link":
            if a.op == "set":
                self.shim.set(name, a.param, a.value, now)
            else:
                self.shim.reset(name, a.param, now)
            self._send(name)
        else:
            inst = self.instances[name]
            if a.op == "set":
                inst.set(a.param, a.value, now)
            else:
                inst.reset(a.param, now)
            if inst.busy is None:
                self._kick(inst)

    def _on_tick(self, e: Event) -> None:
        now = self.sim.now
        actions = self.controller.tick(now)
        for a in actions:
            self._apply(a)
        e.detail = "; ".join(str(a) for a in actions)
        for r in self.controller.release():
            self._start(r)
        if self._active(now + self.cfg.tick_ms):
            self.sim.schedule(now + self.cfg.tick_ms, EventKind.CONTROLLER_TICK)

    def _on_transfer_started(self, session: str, done: SimTime) -> None:
        self.sim.schedule(done, EventKind.KV_TRANSFER_COMPLETE, session, detail=session)

    def _on_transfer_complete(self, e: Event) -> None:
        for inst in self.fabric.complete(e.payload, self.sim.now):
            if inst.busy is None:
                self._kick(inst)

    def _on_hint(self, e: Event) -> None:
        a: ControlAction = e.payload
        try:
            self._apply(a)
        except NoResidentCache:
            pass
