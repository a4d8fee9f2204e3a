import pytest
from hypothesis import given, strategies as st

from sdaserve.core import (
    Granularity, GranularityKind, InvalidField, MessageEnvelope, Priority, PriorityClass, Request,
    validate_request,
)


def req(**kw):
    base = dict(id=1, arrival=10.0, priority=Priority.interactive(), prompt_tokens=100, output_tokens=32,
                slo_deadline=500.0)
    base.update(kw)
    return Request(**base)


def test_valid_request_passes():
    validate_request(req())


def test_zero_prompt_names_field():
    with pytest.raises(InvalidField) as ei:
        validate_request(req(prompt_tokens=0))
    assert ei.value.name == "prompt_tokens"


def test_deadline_equal_to_arrival_rejected():
    with pytest.raises(InvalidField) as ei:
        validate_request(req(slo_deadline=10.0))
    assert ei.value.name == "slo_deadline"


def test_first_violated_field_reported():
    with pytest.raises(InvalidField) as ei:
        validate_request(req(prompt_tokens=0, output_tokens=0))
    assert ei.value.name == "prompt_tokens"


def test_priority_defaults_and_bounds():
    assert Priority.interactive().level >= 4
    assert Priority.interactive() > Priority.background(7)
    with pytest.raises(InvalidField):
        Priority(PriorityClass.BACKGROUND, 8)


priorities = st.builds(Priority, st.sampled_from(list(PriorityClass)), st.integers(0, 7))


@given(priorities, priorities, priorities)
def test_priority_total_preorder(a, b, c):
    assert a <= b or b <= a
    if a <= b and b <= c:
        assert a <= c
    if a <= b and b <= a:
        assert a == b


@pytest.mark.parametrize("text,expected", [
    ("token_stream(16)", Granularity.token_stream(16)),
    ("token_stream", Granularity.token_stream(16)),
    ("stream(4)", Granularity.token_stream(4)),
    ("per_function", Granularity.per_function()),
    ("batch", Granularity.batch_all()),
])
def test_granularity_parse(text, expected):
    assert Granularity.parse(text) == expected
    assert Granularity.parse(str(expected)) == expected


def test_granularity_rejects_bad_chunk():
    with pytest.raises(InvalidField):
        Granularity.token_stream(0)
    with pytest.raises(InvalidField):
        Granularity.parse("batch_all(3)")


def test_envelope_zero_payload_only_as_terminator():
    p = Priority()
    MessageEnvelope(0, 1, ("a", "b"), 0, 0, True, p, 0.0)
    with pytest.raises(InvalidField):
        MessageEnvelope(0, 1, ("a", "b"), 0, 0, False, p, 0.0)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=30))
def test_envelope_reassembly(sizes):
    envs = [MessageEnvelope(i, 7, ("a", "b"), n, i, i == len(sizes) - 1, Priority(), 0.0)
            for i, n in enumerate(sizes)]
    shuffled = sorted(envs, key=lambda e: (e.payload_tokens * 31 + e.seq) % 17)
    ordered = sorted(shuffled, key=lambda e: e.seq)
    assert [e.seq for e in ordered] == list(range(len(sizes)))
    assert sum(e.payload_tokens for e in ordered) == sum(sizes)
    assert sum(e.is_final for e in ordered) == 1 and ordered[-1].is_final
