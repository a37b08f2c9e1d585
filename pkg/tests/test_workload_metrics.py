import json
import random

import pytest

from infershare.config import bundled_scenario_names, load_scenario, parse_scenario
from infershare.errors import ConfigInvalid, TraceParseError
from infershare.sim.engine import Simulation, trace_lines
from infershare.sim.metrics import BillingLedger, compute_report, nearest_rank, read_trace, request_charge
from infershare.sim.workload import WorkloadSpec, forced_misses, generate_arrivals, parse_trace

SINGLE_GPU = """
schema = 1
name = "one"
seed = 3
duration_ms = {duration}

[[workers]]
id = "w1"
profile = "v100"

[[models]]
id = "t/resnet18"
tenant = "t"
manifest = "resnet18"
{workloads}
"""

POISSON = """
[[workloads]]
tenant = "t"
model = "t/resnet18"
rate = {rate}
start_ms = 200.0
"""


def one_gpu(rate=None, duration=10000.0):
    workloads = "" if rate is None else POISSON.format(rate=rate)
    return parse_scenario(SINGLE_GPU.format(duration=duration, workloads=workloads))


# ------------------------------------------------------------------ workloads

def test_zero_rate_gives_no_arrivals():
    assert generate_arrivals(WorkloadSpec("t", "m", rate=0.0, duration_ms=10000.0)) == []


def test_replay_three_lines_verbatim():
    spec = WorkloadSpec("t", "m", pattern="replay", trace="0\n10\n10.5\n")
    assert generate_arrivals(spec) == [0.0, 10.0, 10.5]


def test_replay_rejects_bad_traces():
    with pytest.raises(TraceParseError):
        parse_trace("5\n4\n")
    with pytest.raises(TraceParseError):
        parse_trace("abc\n")


def test_poisson_count_in_range():
    n = len(generate_arrivals(WorkloadSpec("t", "m", rate=1000.0, duration_ms=10000.0, seed=11)))
    assert 9000 <= n <= 11000


def test_streams_independent_and_seeded():
    a = WorkloadSpec("t", "a", rate=100.0, duration_ms=2000.0, seed=5)
    b = WorkloadSpec("t", "b", rate=100.0, duration_ms=2000.0, seed=5)
    assert generate_arrivals(a) == generate_arrivals(a)
    assert generate_arrivals(a) != generate_arrivals(b)
    assert generate_arrivals(a) != generate_arrivals(a, seed=6)


def test_burst_alternates_rates():
    spec = WorkloadSpec("t", "m", pattern="burst", low=10.0, high=1000.0, period_ms=2000.0,
                        duration_ms=8000.0, seed=1)
    arr = generate_arrivals(spec)
    low = sum(1 for t in arr if (t // 1000) % 2 == 0)
    high = len(arr) - low
    assert high > 20 * low


def test_forced_misses_exact_count():
    for n, h in [(100, 0.85), (1000, 0.5), (7, 1.0), (10, 0.0)]:
        assert sum(forced_misses(n, h)) == int(n * (1 - h) + 1e-9)


def test_workload_spec_validation():
    with pytest.raises(ConfigInvalid):
        WorkloadSpec("t", "m", pattern="zigzag")
    with pytest.raises(ConfigInvalid):
        WorkloadSpec("t", "m", pattern="burst")


# -------------------------------------------------------------------- config

def test_bundled_scenarios_parse():
    names = bundled_scenario_names()
    assert "steady.toml" in names
    for name in names:
        load_scenario(name)


def test_scenario_rejects_unknown_model_reference():
    text = SINGLE_GPU.format(duration=10.0, workloads=POISSON.format(rate=1.0).replace("t/resnet18", "nope"))
    with pytest.raises(ConfigInvalid):
        parse_scenario(text)


def test_scenario_rejects_bad_toml():
    with pytest.raises(ConfigInvalid):
        parse_scenario("schema = [")


# ------------------------------------------------------------------- metrics

def test_nearest_rank():
    values = [float(i) for i in range(1, 101)]
    assert nearest_rank(values, 99) == 99.0
    assert nearest_rank(values, 50) == 50.0
    assert nearest_rank([7.47], 99) == 7.47


def test_request_charge():
    assert request_charge(0.97, 2.55) == pytest.approx(6.87e-7, rel=1e-3)


def done(tenant, device_ms=0.97, cost=2.55):
    return {"ev": "done", "tenant_id": tenant, "device_ms": device_ms, "cost_per_hour": cost}


def test_rejected_requests_cost_nothing():
    ledger = BillingLedger()
    assert ledger.charge({"ev": "reject", "tenant": "t"}) == 0.0
    assert ledger.total("t") == 0.0


def test_billing_independent_of_order():
    rng = random.Random(4)
    records = [done(rng.choice("ab"), rng.uniform(0.01, 200.0), rng.choice([2.55, 0.0348])) for _ in range(2000)]
    first = BillingLedger()
    for r in records:
        first.charge(r)
    rng.shuffle(records)
    second = BillingLedger()
    for r in records:
        second.charge(r)
    assert first.totals() == second.totals()


def test_idle_tenant_pays_nothing_in_shared_mode():
    trace = [
        {"ev": "meta", "scenario": "x", "seed": 0, "mode": "shared"},
        {"ev": "arrival", "t": 0.0, "origin": "r1", "tenant": "busy", "model": "m"},
        {"ev": "done", "origin": "r1", "tenant_id": "busy", "model_id": "m", "arrival_time": 0.0,
         "finish_time": 7.47, "exec_ms": 0.97, "device_ms": 0.97, "cost_per_hour": 2.55,
         "residency": "host-hit"},
        {"ev": "arrival", "t": 1.0, "origin": "r2", "tenant": "idle", "model": "n"},
        {"ev": "reject", "t": 1.0, "rid": "r2", "origin": "r2", "tenant": "idle", "model": "n",
         "worker": "w1", "reason": "Overloaded"},
        {"ev": "end", "t": 1000.0},
    ]
    rep = compute_report(trace)
    assert rep.charges["idle"] == 0.0
    assert rep.charges["busy"] == pytest.approx(6.87e-7, rel=1e-3)
    g = rep.group("busy", "m")
    assert g.p99_ms == pytest.approx(7.47)
    assert g.host_hit_ratio == 1.0
    assert rep.group("idle", "n").rejection_fraction == 1.0


def test_hit_ratio_fraction():
    trace = [{"ev": "meta", "mode": "shared"}]
    for i in range(100):
        trace.append({"ev": "arrival", "t": float(i), "origin": f"r{i}", "tenant": "t", "model": "m"})
        trace.append({"ev": "done", "origin": f"r{i}", "tenant_id": "t", "model_id": "m", "arrival_time": float(i),
                      "finish_time": i + 1.0, "exec_ms": 0.97, "device_ms": 0.97, "cost_per_hour": 2.55,
                      "residency": "device-hit" if i < 85 else "host-hit"})
    rep = compute_report(trace)
    assert rep.group("t", "m").device_hit_ratio == pytest.approx(0.85)


def test_read_trace_rejects_garbage():
    with pytest.raises(TraceParseError):
        list(read_trace(["{not json"]))
    with pytest.raises(TraceParseError):
        list(read_trace(['{"t": 1}']))


# -------------------------------------------------------------------- engine

def test_zero_workloads_give_empty_report():
    rep = Simulation(one_gpu(None, duration=1000.0)).run().report
    assert rep.arrivals == 0
    assert rep.groups == {}
    assert rep.throughput == 0.0


def test_utilization_at_500_per_second():
    result = Simulation(one_gpu(500.0)).run()
    rep = result.report
    assert rep.outcomes.get("done", 0) == rep.arrivals
    assert rep.util("w1", "execute") == pytest.approx(0.485, abs=0.02)


def test_report_is_a_pure_function_of_the_trace():
    result = Simulation(one_gpu(200.0, duration=3000.0)).run()
    lines = list(trace_lines(result.trace))
    again = compute_report(read_trace(lines))
    assert again.to_csv() == result.report.to_csv()
    assert again.utilization_csv() == result.report.utilization_csv()
    assert json.loads(lines[0])["ev"] == "meta"


def test_simulation_deterministic_per_seed():
    sc = one_gpu(300.0, duration=3000.0)
    a = list(trace_lines(Simulation(sc).run().trace))
    b = list(trace_lines(Simulation(sc).run().trace))
    c = list(trace_lines(Simulation(sc, seed=99).run().trace))
    assert a == b
    assert a != c
