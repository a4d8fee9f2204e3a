import json
from dataclasses import replace
from pathlib import Path

import pytest

from sdaserve.core import Granularity, Priority, Request
from sdaserve.harness import (
    ConfigError, ExperimentConfig, PolicyConfig, RoleConfig, compare_modes, compute_capacity, load_config,
    run_experiment, simulate,
)
from sdaserve.harness.cli import main
from sdaserve.harness.config import LinkConfig, config_from_dict
from sdaserve.harness.experiment import role_busy_ms, workloads, requests_for
from sdaserve.harness.report import Report
from sdaserve.workload import Fixed

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = ROOT / "configs" / "default.json"


@pytest.fixture(scope="module")
def small():
    cfg = load_config(DEFAULT)
    return replace(cfg, duration_ms=15_000, drain_ms=15_000, load_points=(0.3, 0.9))


def test_config_errors_carry_paths():
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"roles": [{"name": "developer"}], "links": [{"src": "developer", "dst": "reviewer"}]})
    assert ei.value.path == "links[0].dst"
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"seed": 1, "colour": "red"})
    assert ei.value.path == "colour"
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"roles": [{"name": "a"}, {"name": "b", "output_tokens": 3}],
                          "links": [["a", "b"], ["b", "a"]]})
    assert ei.value.path == "links"
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"roles": [{"name": "developer", "replicas": 0}], "links": []})
    assert ei.value.path == "roles[0].replicas"
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"policies": [{"name": "x", "static": "warp"}]})
    assert ei.value.path == "policies[0].static"


def test_bundled_configs_load():
    for p in (ROOT / "configs").glob("*.json"):
        load_config(p)


def test_capacity_single_sequence_example():
    cfg = ExperimentConfig(roles=(RoleConfig("developer", max_num_seqs=1),), links=(),
                           prompt_tokens=Fixed(100), output_tokens=Fixed(32))
    assert role_busy_ms(cfg, "batch_all", "developer") == pytest.approx(523.0)
    assert compute_capacity(cfg, "batch_all") == pytest.approx(1000 / 523)


def test_stream_adds_one_receive_overhead():
    cfg = ExperimentConfig(roles=(RoleConfig("developer"), RoleConfig("tester", output_tokens=Fixed(8))),
                           links=(LinkConfig("developer", "tester"),), output_tokens=Fixed(32))
    gap = role_busy_ms(cfg, "token_stream(16)", "tester") - role_busy_ms(cfg, "batch_all", "tester")
    assert gap == pytest.approx(1.0)


def test_capacity_scales_with_step_sharing():
    one = ExperimentConfig(roles=(RoleConfig("developer", max_num_seqs=1),), links=(),
                           prompt_tokens=Fixed(100), output_tokens=Fixed(32))
    eight = replace(one, roles=(RoleConfig("developer", max_num_seqs=8),))
    decode1 = role_busy_ms(one, "batch_all", "developer") - 11
    decode8 = role_busy_ms(eight, "batch_all", "developer") - 11
    assert decode1 / decode8 == pytest.approx((8 / 23) / (1 / 16))


def test_capacity_bound_close_to_saturation():
    cfg = replace(load_config(DEFAULT).with_policies("batch_all"), load_points=(2.0,), duration_ms=40_000)
    cap = compute_capacity(cfg)
    got = run_experiment(cfg).rows[0].goodput_rps
    assert got <= cap * 1.0001 and got >= 0.9 * cap


def test_zero_length_workload():
    cfg = replace(load_config(DEFAULT), load_points=())
    assert run_experiment(cfg).rows == []
    empty = replace(load_config(DEFAULT), requests=())
    row = run_experiment(empty).rows[0]
    assert row.offered == 0 and row.goodput_rps == 0 and row.mean_e2e_ms is None


def test_report_consistency_and_csv_round_trip(small):
    rep = run_experiment(small)
    for r in rep.rows:
        assert r.completed + r.incomplete == r.offered
        assert r.goodput_rps <= r.offered_rps + 1e-12
        assert all(v is None or v >= 0 for v in (r.mean_e2e_ms, r.p90_e2e_ms, r.mean_ttft_final_ms))
    again = Report.from_csv(rep.to_csv())
    assert again.rows == rep.rows


def test_interactive_stats_from_subset(small):
    res = simulate(small, "token_stream", workloads(small)[0][1])
    done = [r for r in res.requests if r.completed is not None]
    inter = {r.request.id for r in done if r.request.priority.is_interactive}
    assert inter and inter < {r.request.id for r in done}


def test_end_to_end_token_accounting(small):
    for pol in ("token_stream", "per_function", "batch_all", "adaptive"):
        res = simulate(small, pol, workloads(small)[1][1])
        assert all(r.completed is not None for r in res.requests)
        finals = [e for e in res.trace if e.kind.value == "envelope_arrival" and e.detail.endswith("final")]
        assert sorted(e.request_id for e in finals) == sorted(r.request.id for r in res.requests)
        sent = {}
        for e in res.trace:
            if e.kind.value == "envelope_arrival":
                n = int(e.detail.split("n=")[1].split()[0])
                sent[e.request_id] = sent.get(e.request_id, 0) + n
        assert all(sent[r.request.id] == r.hop_outputs[0] for r in res.requests)


def test_determinism_and_policy_independent_arrivals(small):
    spec = workloads(small)[0][1]
    a = simulate(small, "adaptive", spec)
    b = simulate(small, "adaptive", spec)
    assert a.trace.digest() == b.trace.digest()
    arrivals = {p: [r.request for r in simulate(small, p, spec).requests] for p in ("token_stream", "batch_all")}
    assert arrivals["token_stream"] == arrivals["batch_all"] == requests_for(small, spec)
    reseeded = replace(small, seed=small.seed + 1)
    other = simulate(reseeded, "adaptive", workloads(reseeded)[0][1])
    assert other.trace.digest() != a.trace.digest()


def test_poll_before_tick_at_equal_times(small):
    res = simulate(small, "adaptive", workloads(small)[0][1])
    ctl = [(e.time, e.kind.value) for e in res.trace if e.kind.value in ("metric_poll", "controller_tick")]
    assert ctl[0] == (100.0, "metric_poll") and ctl[1] == (100.0, "controller_tick")


def test_monotone_goodput_below_capacity():
    cfg = replace(load_config(DEFAULT).with_policies("batch_all"), load_points=(0.2, 0.4, 0.6, 0.8, 0.9),
                  duration_ms=30_000)
    g = [r.goodput_rps for r in run_experiment(cfg).rows]
    assert g == sorted(g)


def test_compare_modes_winner_per_point(small):
    rep = compare_modes(small)
    assert set(rep.winners) == {"0.3x", "0.9x"}
    assert all(w in {p.name for p in small.policies} for w in rep.winners.values())


def test_slo_violations_count_incomplete():
    reqs = (Request(0, 0.0, Priority.interactive(), 100, 32, slo_deadline=100.0),
            Request(1, 0.0, Priority.interactive(), 100, 32, slo_deadline=1e6))
    cfg = replace(load_config(DEFAULT), requests=reqs, drain_ms=100.0, duration_ms=200.0)
    row = run_experiment(cfg.with_policies("batch_all")).rows[0]
    assert row.incomplete == 2 and row.slo_violation_fraction == 1.0


def test_cli_run_and_capacity(tmp_path, capsys):
    cfg = json.loads((ROOT / "configs" / "single_request.json").read_text())
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["capacity", str(p), "--mode", "batch_all"]) == 0
    assert float(capsys.readouterr().out) > 0
    out = tmp_path / "out"
    assert main(["compare", str(p), "--out", str(out), "--csv", "--trace", "--seed", "3"]) == 0
    text = (out / "report.csv").read_text()
    assert len(Report.from_csv(text).rows) == 2
    assert (out / "trace-requests-token_stream.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"links": [{"src": "developer", "dst": "nobody"}]}))
    assert main(["run", str(bad)]) == 2
