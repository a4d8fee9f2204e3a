"""Random offer/set_mode/dispatch schedules checked against a plain token counter."""

import random
from collections import defaultdict

from sdaserve.core import Granularity, Priority
from sdaserve.dataplane import Link, Shim

MODES = [Granularity.token_stream(1), Granularity.token_stream(5), Granularity.token_stream(16),
         Granularity.per_function(), Granularity.batch_all()]


def random_run(seed: int):
    """Returns (produced per request, delivered envelopes per request) for one random schedule."""
    rng = random.Random(seed)
    shim = Shim()
    link = shim.add_link(Link("a", "b", rng.choice(MODES), pacing_gap=rng.choice([0.0, 0.5, 3.0])))
    produced = defaultdict(int)
    open_reqs = list(range(rng.randint(1, 6)))
    prio = {r: Priority.interactive(rng.randint(4, 7)) if rng.random() < 0.5 else Priority.background()
            for r in open_reqs}
    delivered = defaultdict(list)
    now = 0.0
    while open_reqs:
        now += rng.random() * 4
        op = rng.random()
        if op < 0.6:
            r = rng.choice(open_reqs)
            n = rng.randint(0, 40)
            done = rng.random() < 0.15
            produced[r] += n
            shim.offer_tokens(link.id, r, n, done, boundary=rng.random() < 0.3, priority=prio[r], now=now)
            if done:
                open_reqs.remove(r)
        elif op < 0.8:
            shim.set_mode(link.id, rng.choice(MODES), now)
        for env, t in shim.dispatch(link.id, now) if rng.random() < 0.7 else ():
            delivered[env.request_id].append((t, env))
    for env, t in shim.dispatch(link.id, now + 1):
        delivered[env.request_id].append((t, env))
    return produced, delivered


def check(produced, delivered) -> list:
    """List of violated properties (empty when the run is clean)."""
    bad = []
    for r, n in produced.items():
        envs = delivered.get(r, [])
        if sum(e.payload_tokens for _, e in envs) != n:
            bad.append(f"request {r}: delivered != produced {n}")
        finals = [e for _, e in envs if e.is_final]
        if len(finals) != 1:
            bad.append(f"request {r}: {len(finals)} finals")
        elif envs[-1][1] is not finals[0]:
            bad.append(f"request {r}: final not last")
        if [e.seq for _, e in envs] != list(range(len(envs))):
            bad.append(f"request {r}: seq out of order")
        times = [t for t, _ in envs]
        if times != sorted(times):
            bad.append(f"request {r}: arrivals reordered")
    return bad
