import pytest
from hypothesis import given, strategies as st

from sdaserve.kernel import EventKind, Simulator, TimeInPast, TRACE_COLUMNS


def test_equal_time_dispatched_in_schedule_order():
    sim = Simulator()
    for tag in "abc":
        sim.schedule(5.0, EventKind.METRIC_POLL, detail=tag)
    assert [e.detail for e in sim.run_until(10)] == ["a", "b", "c"]


def test_schedule_now_runs_before_later_events():
    sim = Simulator()
    sim.schedule(3.0, EventKind.CONTROLLER_TICK, detail="late")
    sim.schedule(0.0, EventKind.CONTROLLER_TICK, detail="now")
    assert [e.detail for e in sim.run_until(5)] == ["now", "late"]


def test_time_in_past():
    sim = Simulator()
    sim.schedule(5.0, EventKind.METRIC_POLL)
    sim.run_until(5.0)
    with pytest.raises(TimeInPast):
        sim.schedule(4.0, EventKind.METRIC_POLL)
    with pytest.raises(TimeInPast):
        sim.run_until(1.0)


def test_empty_queue_advances_clock():
    sim = Simulator()
    assert sim.run_until(42.0) == []
    assert sim.now == 42.0


def test_three_events_in_order():
    sim = Simulator()
    for t in (2, 1, 2):
        sim.schedule(t, EventKind.REQUEST_ARRIVAL)
    tr = sim.run_until(10)
    assert [e.time for e in tr] == [1, 2, 2]


def test_events_past_horizon_stay_queued():
    sim = Simulator()
    sim.schedule(1, EventKind.REQUEST_ARRIVAL)
    sim.schedule(20, EventKind.REQUEST_ARRIVAL)
    assert len(sim.run_until(10)) == 1
    assert sim.now == 10 and sim.pending() == 1


def test_handlers_can_chain_events():
    sim = Simulator()
    seen = []

    def h(e):
        seen.append(e.time)
        if e.time < 30:
            sim.schedule(e.time + 10, EventKind.CONTROLLER_TICK)

    sim.on(EventKind.CONTROLLER_TICK, h)
    sim.schedule(0, EventKind.CONTROLLER_TICK)
    sim.run_until(100)
    assert seen == [0, 10, 20, 30]


def test_csv_columns_and_digest_stable():
    def build():
        sim = Simulator()
        sim.schedule(1.5, EventKind.ENVELOPE_ARRIVAL, request_id=3, agent_id="t-0", detail="x")
        sim.run_until(2)
        return sim.trace

    a, b = build(), build()
    assert a.to_csv().splitlines()[0] == ",".join(TRACE_COLUMNS)
    assert a.digest() == b.digest()


@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=60))
def test_dispatch_nondecreasing_with_seq_ties(times):
    sim = Simulator()
    for t in times:
        sim.schedule(t, EventKind.METRIC_POLL)
    tr = sim.run_until(1000)
    keys = [(e.time, e.seq) for e in tr]
    assert keys == sorted(keys)
    assert len(tr) == len(times)
