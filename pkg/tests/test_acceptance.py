"""Acceptance gate: one group of tests per criterion, summarised by conftest.py."""
import math
import random
import time

import numpy as np
import pytest

from infershare.config import load_scenario
from infershare.errors import InferShareError
from infershare.executor import (
    Tensor,
    WeightStore,
    execute_layer,
    execute_layer_counted,
    execute_model,
    generate_weights,
    random_input,
)
from infershare.lifecycle import InferenceRequest
from infershare.manifest import TensorShape, bundled_manifest, chain, layer_flops
from infershare.predictor import DeviceProfile, cost_per_million, predict_exec, predict_transfer, reference_profiles
from infershare.protocol import MAX_FRAME, KINDS, Kind, ProtocolError, decode_frame, encode_frame
from infershare.scheduling import mean_completion, order_items
from infershare.sim import experiments as E
from infershare.sim.engine import Simulation, trace_lines
from infershare.sim.metrics import BillingLedger, compute_report, nearest_rank
from infershare.worker import Worker

from .oracles import brute_force_feasible, brute_force_min_mean_completion, drain, random_layer_case
from .test_scheduling import item

pytestmark = pytest.mark.acceptance

RESNET = bundled_manifest("resnet18")
V100 = reference_profiles()["v100"]
CPU = reference_profiles()["cpu-core"]


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# 1 ---------------------------------------------------------------------------

@criterion(1, "economics: $0.69/M GPU and $1.84/M CPU within $0.01/M")
def test_c01_cost_per_million():
    t0 = time.perf_counter()
    gpu = cost_per_million(V100, 1000.0 / predict_exec(RESNET, V100))
    cpu = cost_per_million(CPU, 1000.0 / predict_exec(RESNET, CPU))
    assert abs(gpu - 0.69) <= 0.01, gpu
    assert abs(cpu - 1.84) <= 0.01, cpu
    assert time.perf_counter() - t0 < 1.0


# 2 ---------------------------------------------------------------------------

@criterion(2, "transfer arithmetic: 6.5 ms copy, 7.47 ms host-hit end to end")
def test_c02_transfer_and_host_hit():
    t0 = time.perf_counter()
    assert RESNET.declared_footprint_bytes == 78_000_000
    assert predict_transfer(RESNET, V100, "host-hit") == (0.0, 6.5)
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    adm = w.admit(InferenceRequest("r", "t", "m"), 0.0)
    [rec] = drain(w, 0.0)
    assert rec.residency == "host-hit"
    assert rec.latency_ms == adm.estimate.total_ms
    # 6.5 + 0.97 as doubles; the exec time is derived from the flop count
    assert rec.latency_ms == pytest.approx(7.47, abs=1e-12)
    assert time.perf_counter() - t0 < 1.0


# 3 ---------------------------------------------------------------------------

@criterion(3, "break-even knee: crossover at hit ratio 0.85 +/- 0.01")
def test_c03_hit_ratio_crossover():
    t0 = time.perf_counter()
    points = E.hit_ratio_sweep(load_scenario("hitratio-sweep"))
    knee = E.crossover(points)
    assert abs(knee - 0.85) <= 0.01, knee
    # transfer-bound below the knee, execute-bound above it
    assert points[0].transfer_util > points[0].exec_util
    assert points[-1].exec_util > points[-1].transfer_util
    assert time.perf_counter() - t0 < 30.0


# 4 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def steady():
    return load_scenario("steady")


@criterion(4, "predictability: p99 <= 1.15 x mean with noise; realized == estimate without")
def test_c04_noise_envelope(steady):
    t0 = time.perf_counter()
    rep = Simulation(steady).run().report
    assert rep.groups
    for key, g in rep.groups.items():
        assert g.done > 1000, key
        assert g.exec_p99_ms <= 1.15 * g.exec_mean_ms, (key, g.exec_p99_ms / g.exec_mean_ms)
    assert time.perf_counter() - t0 < 60.0


@criterion(4, "predictability: p99 <= 1.15 x mean with noise; realized == estimate without")
def test_c04_noise_off_matches_estimate(steady):
    t0 = time.perf_counter()
    result = Simulation(steady, noise=False).run()
    done = [r for r in result.trace if r["ev"] == "done"]
    assert len(done) > 1000
    worst = max(abs((r["finish_time"] - r["arrival_time"]) - r["estimate_ms"]) for r in done)
    # only the rounding of (t + d) - t on millisecond timestamps remains
    assert worst <= 1e-9, worst
    assert time.perf_counter() - t0 < 60.0


# 5 ---------------------------------------------------------------------------

@criterion(5, "scheduler oracle: srpt/min-avg-latency optimal, edf feasible, 1000 instances")
def test_c05_scheduler_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    feasible_seen = 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        work = [float(x) for x in rng.uniform(0.1, 20.0, size=n)]
        deadlines = [float(x) for x in rng.uniform(1.0, 70.0, size=n)]
        best = brute_force_min_mean_completion(work)
        for policy in ("srpt", "min-avg-latency"):
            order = order_items(policy, [item(str(i), w) for i, w in enumerate(work)])
            assert mean_completion(it.work_ms for it in order) == pytest.approx(best, rel=1e-12), policy
        if brute_force_feasible(list(zip(work, deadlines))):
            feasible_seen += 1
            order = order_items("edf", [item(str(i), w, deadline=d)
                                        for i, (w, d) in enumerate(zip(work, deadlines))])
            t = 0.0
            for it in order:
                t += it.work_ms
                assert t <= it.deadline + 1e-9
    assert feasible_seen > 100
    assert time.perf_counter() - t0 < 60.0


# 6 ---------------------------------------------------------------------------

@criterion(6, "cold-start avoidance: shared never cold; VM baseline pays 12 s per idle period")
def test_c06_sporadic_vs_vm():
    t0 = time.perf_counter()
    shared_sc = load_scenario("sporadic")
    warmup = shared_sc.bounds["warmup_ms"]
    shared = Simulation(shared_sc).run()
    bound = predict_transfer(RESNET, V100, "host-hit")[1] + predict_exec(RESNET, V100)
    done = [r for r in shared.trace if r["ev"] == "done" and r["arrival_time"] >= warmup]
    assert len(done) > 20
    assert shared.report.outcomes == {"done": shared.report.arrivals}
    for r in done:
        assert r["residency"] in ("device-hit", "host-hit")
        assert r["fetch_ms"] == 0.0
        # timestamps reach 2e7 ms, where a double resolves about 4e-9 ms
        assert r["finish_time"] - r["arrival_time"] <= bound + 1e-6

    vm_sc = load_scenario("vm-baseline")
    vm = Simulation(vm_sc).run()
    cold_start = vm_sc.cluster.vm_cold_start_ms
    boots = [r for r in vm.trace if r["ev"] == "worker" and r["state"] == "vm-up" and r["t"] >= warmup]
    assert boots, "no idle period ended in the VM baseline"
    penalties = [r for r in vm.trace if r["ev"] == "done"
                 and r["finish_time"] - r["arrival_time"] >= cold_start]
    assert len(penalties) >= len(boots)
    for boot in boots:
        # the request that woke the machine waited for the whole boot
        waker = [r for r in penalties if r["tenant_id"] == boot["tenant"] and r["arrival_time"] == boot["t"]]
        assert waker, boot
    assert not any(r["finish_time"] - r["arrival_time"] >= cold_start for r in done)
    assert time.perf_counter() - t0 < 60.0


# 7 ---------------------------------------------------------------------------

@criterion(7, "elasticity: 10x step reaches target within window + load; transition p99 under bound")
def test_c07_burst_scale_out():
    t0 = time.perf_counter()
    sc = load_scenario("burst")
    model = sc.models[0].model_id
    result = Simulation(sc).run()
    window = sc.cluster.demand_window_ms
    load = E.load_time_ms(sc, model)
    bound = E.burst_bound_ms(sc, model)
    for step in sc.bounds["step_ms"]:
        targets = [n for t, n in E.scale_targets(result.trace, model) if step < t <= step + window]
        assert targets, f"no scaling decision within one window of {step}"
        target = max(targets)
        assert target >= 2
        reached = E.time_to_reach(result.trace, model, target, step)
        assert reached <= window + load + 1e-9, (step, reached)
        p99 = E.window_p99(result.trace, model, step, step + reached)
        assert p99 < bound, (step, p99, bound)
    assert time.perf_counter() - t0 < 60.0


# 8 ---------------------------------------------------------------------------

@criterion(8, "isolation: victim p99 within oracle bound under fair+edf; FIFO degrades it")
def test_c08_isolation():
    t0 = time.perf_counter()
    sc = load_scenario("isolation")
    b = sc.bounds
    fair = Simulation(sc).run()
    victim_p99 = nearest_rank(E.victim_latencies(fair.trace, b["victim"], b["warmup_ms"]), 99)
    oracle = E.isolation_oracle(sc, b["victim"], b["aggressor"], b["warmup_ms"])
    assert victim_p99 <= oracle, (victim_p99, oracle)

    fifo = Simulation(sc.with_cluster(policy="fifo", fair=False)).run()
    fifo_p99 = nearest_rank(E.victim_latencies(fifo.trace, b["victim"], b["warmup_ms"]), 99)
    assert fifo_p99 > victim_p99
    assert time.perf_counter() - t0 < 60.0


# 9 ---------------------------------------------------------------------------

def _identity_store(n):
    store = WeightStore(generated_from=0)
    store.tensors["l0"] = (np.eye(n), np.zeros(n))
    return store


@criterion(9, "executor: layer oracles and op counts on 100 random shapes")
def test_c09_layer_oracles():
    m = chain("id", TensorShape.of(None, 5), ("dense", {"units": 5}))
    v = Tensor.from_array([[1.5, -2.0, 0.0, 3.25, 7.0]])
    assert execute_layer(m.layers[0], [v], _identity_store(5)) == v

    s = chain("s", TensorShape.of(None, 4), ("softmax", {}))
    out = execute_layer(s.layers[0], [Tensor.from_array([[0.0] * 4])], None)
    assert out.values.tolist() == [0.25] * 4

    c = chain("c", TensorShape.of(None, 1, 2, 2), ("conv2d", {"out_channels": 1, "kernel_h": 2, "kernel_w": 2}))
    store = WeightStore(generated_from=0)
    store.tensors["l0"] = (np.ones((1, 1, 2, 2)), np.zeros(1))
    out = execute_layer(c.layers[0], [Tensor.from_array([[[[1.0, 2.0], [3.0, 4.0]]]])], store)
    assert out.values.tolist() == [10.0]

    for name in ("mlp_small", "cnn_tiny"):
        mm = bundled_manifest(name)
        w = generate_weights(mm)
        x = random_input(mm, 2, seed=9)
        both = execute_model(mm, w, x)
        rows = [execute_model(mm, w, Tensor((1,) + x.shape[1:], x.array[i:i + 1])) for i in range(2)]
        assert np.array_equal(both.array, np.concatenate([r.array for r in rows]))


@criterion(9, "executor: layer oracles and op counts on 100 random shapes")
def test_c09_op_counts_random_shapes():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    kinds = set()
    for _ in range(100):
        layer, inputs, weights, in_shapes, batch = random_layer_case(rng)
        _, ops = execute_layer_counted(layer, inputs, weights)
        assert ops == layer_flops(layer, in_shapes, batch), layer
        kinds.add(layer.kind)
    assert len(kinds) == 8
    assert time.perf_counter() - t0 < 120.0


# 10 --------------------------------------------------------------------------

@criterion(10, "determinism and safety: identical reports, 1e5 fuzz frames, 1e4 cache events")
def test_c10_byte_identical_reports(steady):
    for sc in (steady, load_scenario("burst")):
        a, b = Simulation(sc).run(), Simulation(sc).run()
        assert a.report.to_csv() == b.report.to_csv()
        assert a.report.to_json() == b.report.to_json()
        assert list(trace_lines(a.trace)) == list(trace_lines(b.trace))


@criterion(10, "determinism and safety: identical reports, 1e5 fuzz frames, 1e4 cache events")
def test_c10_protocol_fuzz():
    rng = random.Random(10)
    valid = [encode_frame(k, {"id": i, "x": [1, 2.5, "s"]}) for i, k in enumerate(Kind)]
    kinds = sorted(KINDS)
    outcomes = {"ok": 0, "error": 0}
    for i in range(100_000):
        mode = i % 4
        if mode == 0:
            blob = rng.randbytes(rng.randrange(0, 40))
        elif mode == 1:
            # plausible header, random body
            body = rng.randbytes(rng.randrange(0, 30))
            blob = (len(body) + 1).to_bytes(4, "big") + bytes([rng.choice(kinds)]) + body
        elif mode == 2:
            # bit-flip a valid frame
            buf = bytearray(rng.choice(valid))
            for _ in range(rng.randrange(1, 4)):
                buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
            blob = bytes(buf)
        else:
            # lengths around the limit and truncations
            length = rng.choice([0, 1, MAX_FRAME, MAX_FRAME + 1, 2**32 - 1, rng.randrange(2**32)])
            blob = length.to_bytes(4, "big") + rng.randbytes(rng.randrange(0, 8))
        try:
            frame, used = decode_frame(blob)
        except ProtocolError:
            outcomes["error"] += 1
            continue
        assert 5 <= used <= len(blob)
        assert isinstance(frame.payload, dict)
        outcomes["ok"] += 1
    assert sum(outcomes.values()) == 100_000
    assert outcomes["ok"] > 0 and outcomes["error"] > 0


@criterion(10, "determinism and safety: identical reports, 1e5 fuzz frames, 1e4 cache events")
def test_c10_cache_invariants_random_streams():
    import heapq

    t0 = time.perf_counter()
    rng = random.Random(7)
    dev = DeviceProfile("d", "virtual-gpu", 1e11, 100_000_000, 12e9, 1e9, 1.0)
    events = 0
    for stream in range(5):
        w = Worker(f"w{stream}", dev, 400_000_000, policy=rng.choice(["fifo", "srpt", "edf"]))
        models = {}
        for i in range(12):
            nbytes = rng.choice([5, 10, 20, 30, 45]) * 1_000_000
            models[f"m{i}"] = chain(f"m{i}", TensorShape.of(None, 32), ("dense", {"units": 32}),
                                    footprint_bytes=nbytes)
        registered = set()
        heap, seq, now = [], 0, 0.0
        while events < (stream + 1) * 2000:
            op = rng.random()
            mid = rng.choice(sorted(models))
            if op < 0.1 and mid not in registered:
                try:
                    w.load_model(mid, models[mid])
                    registered.add(mid)
                except InferShareError:
                    pass
            elif op < 0.13 and mid in registered:
                try:
                    w.evict_model(mid, now)
                    registered.discard(mid)
                except InferShareError:
                    pass
            elif op < 0.75 and registered:
                rid = f"r{stream}-{events}"
                target = rng.choice(sorted(registered))
                deadline = rng.choice([None, None, 5.0, 50.0])
                w.admit(InferenceRequest(rid, rng.choice("ab"), target, arrival_time=now, deadline_ms=deadline),
                        now)
            elif heap:
                now, _, stage, dur = heapq.heappop(heap)
                w.complete(stage, now, dur)
            for stage in w.dispatch(now):
                seq += 1
                heapq.heappush(heap, (now + stage.predicted_ms, seq, stage, stage.predicted_ms))
            w.check_invariants()
            assert w.cache.device.used_bytes <= dev.device_memory_bytes
            assert w.cache.host.used_bytes <= 400_000_000
            events += 1
            now += rng.expovariate(1.0)
    assert events >= 10_000
    assert time.perf_counter() - t0 < 300.0


# 11 --------------------------------------------------------------------------

TWO_TENANTS = """
schema = 1
name = "billing"
seed = {seed}
duration_ms = 5000.0

[[workers]]
id = "w1"
profile = "v100"

[[workers]]
id = "w2"
profile = "cpu-core"

[[models]]
id = "a/resnet18"
tenant = "a"
manifest = "resnet18"

[[models]]
id = "b/mlp"
tenant = "b"
manifest = "mlp_small"

[[models]]
id = "idle/resnet18"
tenant = "idle"
manifest = "resnet18"

[[workloads]]
tenant = "a"
model = "a/resnet18"
rate = {rate_a}

[[workloads]]
tenant = "b"
model = "b/mlp"
rate = {rate_b}
"""


@criterion(11, "billing: interleaving-invariant and idle-free on random two-tenant scenarios")
def test_c11_billing_invariants():
    from infershare.config import parse_scenario

    t0 = time.perf_counter()
    rng = random.Random(11)
    for _ in range(6):
        sc = parse_scenario(TWO_TENANTS.format(seed=rng.randrange(2**31), rate_a=rng.uniform(10, 400),
                                               rate_b=rng.uniform(10, 400)))
        result = Simulation(sc).run()
        charges = result.report.charges
        assert charges.get("idle", 0.0) == 0.0
        done = [r for r in result.trace if r["ev"] == "done"]
        # each completed request pays exactly its device time at its device's rate
        for tenant in ("a", "b"):
            expected = math.fsum(r["device_ms"] * r["cost_per_hour"] / 3.6e6 for r in done if r["tenant_id"] == tenant)
            assert charges[tenant] == expected
        # non-completions cost nothing, in any interleaving
        others = [r for r in result.trace if r["ev"] in ("reject", "cancel", "lost")]
        for _ in range(3):
            records = done + others
            rng.shuffle(records)
            ledger = BillingLedger()
            for r in records:
                ledger.charge(r)
            assert ledger.total("a") == charges["a"] and ledger.total("b") == charges["b"]
            assert ledger.total("idle") == 0.0
        # and the report is a function of the trace alone
        assert compute_report(result.trace).charges == charges
    assert time.perf_counter() - t0 < 30.0
