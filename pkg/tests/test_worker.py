import pytest

from infershare.errors import UnknownModel
from infershare.lifecycle import InferenceRequest, RequestState, Residency
from infershare.manifest import TensorShape, bundled_manifest, chain
from infershare.predictor import DeviceProfile, reference_profiles
from infershare.worker import Worker

from .oracles import drain

RESNET = bundled_manifest("resnet18")
V100 = reference_profiles()["v100"]


def warm(worker, model_id, t=0.0):
    worker.admit(InferenceRequest(f"warm-{model_id}-{t}", "t", model_id, arrival_time=t), t)
    return drain(worker, t)


def test_device_hit_admitted_with_exec_estimate():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    warm(w, "m")
    adm = w.admit(InferenceRequest("r", "t", "m", arrival_time=10.0, deadline_ms=10.0), 10.0)
    assert adm.admitted and adm.estimate.total_ms == pytest.approx(0.97, abs=1e-12)
    [rec] = drain(w, 10.0)
    # equal up to the rounding of (10 + 0.97) - 10
    assert rec.latency_ms == pytest.approx(adm.estimate.total_ms, abs=1e-12)
    assert rec.residency == "device-hit"


def test_deadline_shorter_than_copy_is_rejected():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    req = InferenceRequest("r", "t", "m", deadline_ms=5.0)
    adm = w.admit(req, 0.0)
    assert not adm.admitted and adm.reason == "WouldMissDeadline"
    assert req.state == RequestState.REJECTED


def test_no_deadline_always_admitted():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    assert all(w.admit(InferenceRequest(f"r{i}", "t", "m"), 0.0).admitted for i in range(20))


def test_host_hit_end_to_end():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    adm = w.admit(InferenceRequest("r", "t", "m"), 0.0)
    [rec] = drain(w, 0.0)
    assert rec.residency == "host-hit"
    assert rec.latency_ms == pytest.approx(7.47, abs=1e-12)
    assert rec.latency_ms == adm.estimate.total_ms
    assert (rec.fetch_ms, rec.transfer_ms) == (0.0, 6.5)


def test_cold_record_has_every_stage():
    w = Worker("w", V100, 100_000_000)
    w.load_model("a", RESNET)
    w.load_model("b", RESNET)          # pushes a out of the 100 MB host cache
    assert w.residency("a") == Residency.COLD
    w.admit(InferenceRequest("r", "t", "a"), 0.0)
    [rec] = drain(w, 0.0)
    assert rec.residency == "cold"
    assert rec.fetch_ms > 0 and rec.transfer_ms > 0 and rec.exec_ms > 0
    assert rec.latency_ms == pytest.approx(78.0 + 6.5 + 0.97, abs=1e-9)


def test_joined_transfer_is_inflight():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    w.admit(InferenceRequest("a", "t", "m"), 0.0)
    w.dispatch(0.0)
    assert w.residency("m") == Residency.INFLIGHT
    adm = w.admit(InferenceRequest("b", "t", "m", arrival_time=1.0), 1.0)
    assert adm.estimate.transfer_ms == 0.0
    assert adm.estimate.total_ms == pytest.approx(6.5 - 1.0 + 0.97 * 2, abs=1e-12)


def test_load_then_infer_skips_fetch():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    assert w.residency("m") == Residency.HOST
    adm = w.admit(InferenceRequest("r", "t", "m"), 0.0)
    assert adm.estimate.fetch_ms == 0.0


def test_evict_unknown():
    with pytest.raises(UnknownModel):
        Worker("w", V100, 10**9).evict_model("nope")


def test_evict_waits_for_inflight_requests():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    w.admit(InferenceRequest("r", "t", "m"), 0.0)
    assert w.evict_model("m") is False
    assert not w.registered("m")
    drain(w, 0.0)
    assert "m" not in w.models and "m" not in w.cache.host


def test_forty_small_models_churn_through_small_device():
    small = chain("s", TensorShape.of(None, 64), ("dense", {"units": 64}), footprint_bytes=10_000_000)
    dev = DeviceProfile("d", "virtual-gpu", 1e12, 256_000_000, 12e9, 1e9, 1.0)
    w = Worker("w", dev, 10**9)
    for i in range(40):
        w.load_model(f"m{i}", small)
    assert all(w.residency(f"m{i}") == Residency.HOST for i in range(40))
    residencies = []
    t = 0.0
    for rnd in range(3):
        for i in range(40):
            w.admit(InferenceRequest(f"r{rnd}-{i}", "t", f"m{i}", arrival_time=t), t)
            recs = drain(w, t)
            t = recs[-1].finish_time
            residencies.append(recs[-1].residency)
            w.check_invariants()
            assert w.cache.device.used_bytes <= dev.device_memory_bytes
    # 25 fit at a time: cyclic access over 40 means every request misses the device
    assert residencies.count("host-hit") == 120


def _profile(rate=1e9):
    return DeviceProfile("d", "virtual-gpu", rate, 10**9, 12e9, 1e9, 1.0)


def _models():
    small = chain("small", TensorShape.of(None, 500), ("dense", {"units": 1000}))   # 1 ms
    big = chain("big", TensorShape.of(None, 2000), ("dense", {"units": 1000}))      # 4 ms
    return small, big


def test_reroute_when_burst_overtakes_deadline():
    small, big = _models()
    w = Worker("w", _profile(), 10**9, policy="srpt")
    w.load_model("small", small)
    w.load_model("big", big)
    warm(w, "small")
    warm(w, "big", 100.0)
    t = 200.0
    w.admit(InferenceRequest("head", "t", "big", arrival_time=t), t)
    w.dispatch(t)
    assert w.admit(InferenceRequest("victim", "t", "big", arrival_time=t, deadline_ms=10.0), t).admitted
    assert [d.action for d in w.reroute_check(t)] == ["keep"]
    for i in range(20):
        w.admit(InferenceRequest(f"b{i}", "u", "small", arrival_time=t), t)
    decisions = {d.request_id: d.action for d in w.reroute_check(t)}
    assert decisions == {"victim": "cancel-and-reroute"}
    assert "head" not in decisions
    assert w.cancel("victim", t, RequestState.REROUTED)
    w.check_invariants()


def test_drained_worker_keeps_everything():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    warm(w, "m")
    assert w.reroute_check(50.0) == []


def test_overloaded_and_tenant_ceiling():
    small, _ = _models()
    w = Worker("w", _profile(), 10**9, admission_ceiling_ms=5.0, tenant_ceiling_ms={"noisy": 3.0})
    w.load_model("small", small)
    warm(w, "small")
    t = 50.0
    reasons = [w.admit(InferenceRequest(f"n{i}", "noisy", "small", arrival_time=t), t).reason for i in range(4)]
    assert reasons == [None, None, None, "TenantOverloaded"]
    reasons = [w.admit(InferenceRequest(f"q{i}", "quiet", "small", arrival_time=t), t).reason for i in range(4)]
    assert reasons[-1] == "Overloaded"


def test_model_too_large_for_device():
    dev = DeviceProfile("d", "virtual-gpu", 1e12, 50_000_000, 12e9, 1e9, 1.0)
    w = Worker("w", dev, 10**9)
    w.load_model("m", RESNET)
    assert w.admit(InferenceRequest("r", "t", "m"), 0.0).reason == "ModelTooLarge"


def test_cancel_queued_request_releases_everything():
    w = Worker("w", V100, 10**9)
    w.load_model("a", RESNET)
    w.load_model("b", RESNET)
    w.admit(InferenceRequest("r1", "t", "a"), 0.0)
    w.admit(InferenceRequest("r2", "t", "b"), 0.0)
    running = w.dispatch(0.0)
    assert not w.cancel("r1", 1.0)        # occupying the copy link
    assert w.cancel("r2", 1.0)
    w.check_invariants()
    [rec] = drain(w, 1.0, running=running)
    assert rec.request_id == "r1"
    assert "b" not in w.cache.device


def test_worker_failure_returns_unfinished_requests():
    w = Worker("w", V100, 10**9)
    w.load_model("m", RESNET)
    for i in range(3):
        w.admit(InferenceRequest(f"r{i}", "t", "m"), 0.0)
    w.dispatch(0.0)
    lost = w.fail(1.0)
    assert sorted(r.request_id for r in lost) == ["r0", "r1", "r2"]
    with pytest.raises(UnknownModel):
        w.admit(InferenceRequest("x", "t", "m"), 2.0)


def test_batching_coalesces_same_model():
    small, _ = _models()
    dev = DeviceProfile("d", "virtual-gpu", 1e9, 10**9, 12e9, 1e9, 1.0, max_batch=8,
                        batch_efficiency=((1, 1.0), (8, 4.0)))
    w = Worker("w", dev, 10**9, batching=True, policy="srpt")
    w.load_model("small", small)
    warm(w, "small")
    t = 10.0
    for i in range(5):
        w.admit(InferenceRequest(f"r{i}", "t", "small", arrival_time=t), t)
    recs = drain(w, t)
    assert len(recs) == 5
    assert {r.batch_size for r in recs} == {5}
    assert sum(r.device_ms for r in recs) == pytest.approx(recs[0].exec_ms)
