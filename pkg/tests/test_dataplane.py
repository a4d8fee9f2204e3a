import pytest
from hypothesis import given, settings, strategies as st

from _shim_oracle import check, random_run
from sdaserve.core import Granularity, Priority
from sdaserve.dataplane import InvalidGranularity, Link, Shim, UnknownLink
from sdaserve.runtime import UnknownParameter, ValueOutOfRange


def make(mode, **kw):
    shim = Shim()
    link = shim.add_link(Link("dev", "tst", mode, **kw))
    return shim, link.id


def test_stream_chunking():
    shim, lid = make(Granularity.token_stream(16))
    assert shim.offer_tokens(lid, 1, 10) == []
    out = shim.offer_tokens(lid, 1, 10)
    assert [e.payload_tokens for e in out] == [16]
    assert shim.link(lid).buffered_tokens(1) == 4


def test_stream_final_partial_chunk():
    shim, lid = make(Granularity.token_stream(16))
    out = shim.offer_tokens(lid, 1, 20, True)
    assert [(e.payload_tokens, e.is_final) for e in out] == [(16, False), (4, True)]


def test_batch_single_envelope():
    shim, lid = make(Granularity.batch_all())
    assert shim.offer_tokens(lid, 1, 10) == [] and shim.offer_tokens(lid, 1, 10) == []
    out = shim.offer_tokens(lid, 1, 12, True)
    assert [(e.payload_tokens, e.is_final) for e in out] == [(32, True)]


def test_per_function_boundaries():
    shim, lid = make(Granularity.per_function())
    sizes = []
    for n, last in ((40, False), (50, False), (60, True)):
        sizes += [e.payload_tokens for e in shim.offer_tokens(lid, 1, n, last, boundary=True)]
    assert sizes == [40, 50, 60]


def test_switch_batch_to_stream_releases_full_chunk():
    shim, lid = make(Granularity.batch_all())
    shim.offer_tokens(lid, 1, 20)
    shim.set_mode(lid, Granularity.token_stream(16))
    sent = shim.dispatch(lid, 0.0)
    assert [e.payload_tokens for e, _ in sent] == [16]
    assert shim.link(lid).buffered_tokens(1) == 4


def test_switch_stream_to_batch_holds_until_completion():
    shim, lid = make(Granularity.token_stream(16))
    first = shim.offer_tokens(lid, 1, 20)
    shim.set_mode(lid, "batch_all")
    assert shim.offer_tokens(lid, 1, 30) == []
    last = shim.offer_tokens(lid, 1, 2, True)
    assert [e.payload_tokens for e in first + last] == [16, 36]
    assert last[0].is_final


def test_unknown_link_and_bad_granularity():
    shim, lid = make(Granularity.batch_all())
    with pytest.raises(UnknownLink):
        shim.offer_tokens("nope", 1, 1)
    with pytest.raises(UnknownLink):
        shim.set_mode("nope", Granularity.batch_all())
    with pytest.raises(InvalidGranularity):
        shim.set_mode(lid, "token_stream(0)")


def test_priority_order_then_fifo():
    shim, lid = make(Granularity.batch_all())
    shim.offer_tokens(lid, 1, 5, True, priority=Priority.background(2))
    shim.offer_tokens(lid, 2, 5, True, priority=Priority.interactive(5))
    shim.offer_tokens(lid, 3, 5, True, priority=Priority.interactive(5))
    assert [e.request_id for e, _ in shim.dispatch(lid, 0.0)] == [2, 3, 1]


def test_pacing_arithmetic():
    shim, lid = make(Granularity.batch_all(), pacing_gap=5.0, network_delay=1.0)
    shim.offer_tokens(lid, 1, 5, True)
    shim.offer_tokens(lid, 2, 5, True)
    assert [t for _, t in shim.dispatch(lid, 0.0)] == [1.0, 6.0]
    assert shim.dispatch(lid, 0.0) == []


def test_link_knobs():
    shim, lid = make(Granularity.batch_all())
    shim.set(lid, "comm_mode", "token_stream(8)")
    assert shim.link(lid).mode == Granularity.token_stream(8)
    shim.set(lid, "chunk_tokens", 4)
    assert shim.link(lid).mode == Granularity.token_stream(4)
    shim.set(lid, "pacing_gap", 2.5)
    assert shim.link(lid).pacing_gap == 2.5
    shim.reset(lid, "comm_mode")
    assert shim.link(lid).mode == Granularity.batch_all()
    with pytest.raises(UnknownParameter):
        shim.set(lid, "bogus", 1)
    with pytest.raises(ValueOutOfRange):
        shim.set(lid, "pacing_gap", -1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_conservation_under_random_switching(seed):
    assert check(*random_run(seed)) == []
