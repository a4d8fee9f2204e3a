"""Tiny event loop around a few AgentInstances, for runtime-level tests."""

from sdaserve.kernel import EventKind, Simulator
from sdaserve.runtime import AgentInstance, KvFabric


class Bench:
    def __init__(self, *instances: AgentInstance, fabric: bool = True):
        self.sim = Simulator()
        self.insts = {i.id: i for i in instances}
        self.fabric = KvFabric() if fabric else None
        if self.fabric is not None:
            for i in instances:
                self.fabric.attach(i)
            self.fabric.on_transfer_started = lambda s, done: self.sim.schedule(
                done, EventKind.KV_TRANSFER_COMPLETE, s)
        self.activities = []  # (instance id, Activity)
        self.completed = []  # (instance id, HopState)
        self.emitted = {}  # (request id, hop) -> tokens
        self.idle_violations = []
        self.sim.on(EventKind.REQUEST_ARRIVAL, self._call)
        self.sim.on(EventKind.BATCH_STEP_COMPLETE, self._done)
        self.sim.on(EventKind.KV_TRANSFER_COMPLETE, self._xfer)

    def at(self, t, fn):
        """Run ``fn(now)`` at time t, then let every instance pick up work."""
        self.sim.schedule(t, EventKind.REQUEST_ARRIVAL, fn)

    def _kick_all(self):
        for inst in self.insts.values():
            act = inst.next_activity(self.sim.now)
            if act is not None:
                self.activities.append((inst.id, act))
                self.sim.schedule(act.end, EventKind.BATCH_STEP_COMPLETE, inst)
            elif inst.busy is None:
                runnable = [i for i in inst.queue if not i.blocked
                            and inst.knobs.values["admission"].admits(i.priority)]
                if inst.batch or (runnable and len(inst.batch) < inst.max_num_seqs):
                    self.idle_violations.append((self.sim.now, inst.id))

    def _call(self, e):
        e.payload(self.sim.now)
        self._kick_all()

    def _done(self, e):
        inst = e.payload
        out = inst.complete_activity(self.sim.now)
        for em in out.emissions:
            key = (em.hop.request.id, em.hop.hop)
            self.emitted[key] = self.emitted.get(key, 0) + em.tokens
        self.completed += [(inst.id, st) for st in out.completed]
        self._kick_all()

    def _xfer(self, e):
        self.fabric.complete(e.payload, self.sim.now)
        self._kick_all()

    def run(self, t_end=1e9):
        self.sim.run_until(t_end)
        return self

    def acts(self, inst_id, kind=None):
        return [a for i, a in self.activities if i == inst_id and (kind is None or a.kind == kind)]

    def first_token(self, rid):
        for _, st in self.completed:
            if st.request.id == rid:
                return st.first_token
        return None
