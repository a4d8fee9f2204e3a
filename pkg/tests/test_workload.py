import numpy as np
from hypothesis import given, settings, strategies as st

from sdaserve.core import PriorityClass
from sdaserve.workload import Fixed, Uniform, WorkloadSpec, gen_arrivals, parse_dist, substream


def test_count_within_three_sigma():
    reqs = gen_arrivals(WorkloadSpec(arrival_rate=10, duration=100_000, seed=42))
    assert 850 <= len(reqs) <= 1150


def test_mean_count_over_seeds():
    counts = [len(gen_arrivals(WorkloadSpec(10, 100_000, seed=s))) for s in range(100)]
    assert abs(np.mean(counts) - 1000) <= 20


def test_interactive_fraction_zero():
    reqs = gen_arrivals(WorkloadSpec(20, 10_000, interactive_fraction=0.0, seed=3))
    assert reqs and all(r.priority.klass == PriorityClass.BACKGROUND for r in reqs)


def test_same_seed_same_requests():
    w = WorkloadSpec(5, 20_000, seed=9, sessions=4)
    assert gen_arrivals(w) == gen_arrivals(w)


def test_substreams_independent():
    # sizes do not depend on the arrival stream's consumption
    a = substream(1, "prompt_sizes").integers(0, 1000, 10)
    b = substream(1, "prompt_sizes").integers(0, 1000, 10)
    c = substream(1, "arrivals").integers(0, 1000, 10)
    assert (a == b).all() and not (a == c).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.floats(0.5, 50), st.integers(1, 200), st.integers(1, 200))
def test_sizes_and_times_within_spec(seed, rate, lo, span):
    w = WorkloadSpec(rate, 5_000, prompt_tokens_dist=Uniform(lo, lo + span), output_tokens_dist=Fixed(7),
                     seed=seed)
    reqs = gen_arrivals(w)
    times = [r.arrival for r in reqs]
    assert times == sorted(times) and all(0 <= t < 5_000 for t in times)
    assert all(lo <= r.prompt_tokens <= lo + span and r.output_tokens == 7 for r in reqs)


def test_parse_dist():
    assert parse_dist({"fixed": 3}) == Fixed(3)
    assert parse_dist({"uniform": [1, 4]}) == Uniform(1, 4)
    assert parse_dist(5) == Fixed(5)
