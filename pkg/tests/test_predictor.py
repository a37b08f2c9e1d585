import math

import pytest

from infershare.lifecycle import InferenceRequest
from infershare.manifest import TensorShape, bundled_manifest, chain
from infershare.predictor import (
    EXEC_FLOOR_MS,
    CalibrationState,
    DeviceProfile,
    breakeven_from_times,
    breakeven_hit_ratio,
    cost_per_million,
    lognormal_sigma_for_ratio,
    predict_exec,
    predict_transfer,
    reference_profiles,
    update_calibration,
)
from infershare.worker import Worker

from .oracles import drain

RESNET = bundled_manifest("resnet18")
V100 = reference_profiles()["v100"]
CPU = reference_profiles()["cpu-core"]


def test_exec_reproduces_reference_latencies():
    assert predict_exec(RESNET, V100) == pytest.approx(0.97, abs=1e-12)
    assert predict_exec(RESNET, CPU) == pytest.approx(190.80, abs=1e-9)


def test_exec_floor_for_zero_flop_model():
    relu = chain("r", TensorShape.of(None, 1), ("flatten", {}))
    assert predict_exec(relu, V100) == EXEC_FLOOR_MS > 0


def test_transfer_arithmetic():
    assert RESNET.declared_footprint_bytes == 78_000_000
    assert predict_transfer(RESNET, V100, "host-hit") == (0.0, 6.5)
    assert predict_transfer(RESNET, V100, "device-hit") == (0.0, 0.0)
    assert predict_transfer(RESNET, V100, "cold") == (78.0, 6.5)


def test_ewma_examples():
    cal = CalibrationState()
    update_calibration(cal, "k", 10.0)
    assert cal.get("k").ewma == 10.0
    update_calibration(cal, "k", 20.0)
    assert cal.get("k").ewma == pytest.approx(10.5, abs=1e-12)
    const = CalibrationState()
    for _ in range(1000):
        update_calibration(const, "c", 7.0)
    assert const.get("c").ewma == 7.0 and const.get("c").variance == 0.0
    with pytest.raises(ValueError):
        update_calibration(const, "c", 0.0)


def test_calibration_takes_over_after_enough_samples():
    cal = CalibrationState()
    key = ("m", V100.device_id, 1)
    for _ in range(9):
        update_calibration(cal, key, 2.0)
    assert predict_exec(RESNET, V100, 1, cal, "m") == pytest.approx(0.97)
    update_calibration(cal, key, 2.0)
    assert predict_exec(RESNET, V100, 1, cal, "m") == 2.0


def test_cost_per_million():
    assert cost_per_million(V100, 1031) == pytest.approx(0.687, abs=5e-4)
    assert cost_per_million(CPU, 5.24) == pytest.approx(1.845, abs=5e-4)
    assert cost_per_million(V100, 2062) == pytest.approx(cost_per_million(V100, 1031) / 2)
    with pytest.raises(ValueError):
        cost_per_million(V100, 0)


def test_breakeven():
    assert breakeven_hit_ratio(RESNET, V100) == pytest.approx(1 - 0.97 / 6.5, abs=1e-12)
    assert round(breakeven_hit_ratio(RESNET, V100), 4) == 0.8508
    assert breakeven_from_times(7.0, 6.5) == 0.0
    assert breakeven_from_times(1e-12, 6.5) == pytest.approx(1.0)


def test_lognormal_sigma_hits_requested_ratio():
    s = lognormal_sigma_for_ratio(1.15)
    z = 2.3263478740408408
    assert math.exp(z * s - s * s / 2) == pytest.approx(1.15, rel=1e-12)


def test_batch_efficiency_endpoints():
    assert V100.efficiency(1) == 1.0
    assert V100.efficiency(256) * (1000 / 0.97) == pytest.approx(4083.0)
    assert V100.efficiency(1) < V100.efficiency(16) < V100.efficiency(256) == V100.efficiency(1024)


def test_profile_validation():
    with pytest.raises(ValueError):
        DeviceProfile("x", "quantum", 1.0, 1, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        DeviceProfile("x", "virtual-gpu", 0.0, 1, 1.0, 1.0, 1.0)


def _worker(**kw):
    return Worker("w", V100, 10**9, **kw)


def test_estimate_empty_device_hit_is_exec_only():
    w = _worker()
    w.load_model("m", RESNET)
    w.admit(InferenceRequest("warm", "t", "m"), 0.0)
    drain(w, 0.0)
    adm = w.admit(InferenceRequest("r", "t", "m", arrival_time=100.0), 100.0)
    assert adm.estimate.total_ms == pytest.approx(0.97, abs=1e-12)
    assert adm.estimate.queue_ms == 0.0


def test_estimate_queue_behind_pending_exec():
    slow = chain("slow", TensorShape.of(None, 1000), ("dense", {"units": 1000}))
    dev = DeviceProfile("d", "virtual-gpu", 2e6 / 5e-3, 10**9, 12e9, 1e9, 1.0)
    w = Worker("w", dev, 10**9)
    w.load_model("m", slow)
    w.admit(InferenceRequest("warm", "t", "m"), 0.0)
    drain(w, 0.0)
    w.admit(InferenceRequest("a", "t", "m", arrival_time=50.0), 50.0)
    adm = w.admit(InferenceRequest("b", "t", "m", arrival_time=50.0), 50.0)
    assert adm.estimate.queue_ms == pytest.approx(5.0, abs=1e-12)


def test_estimate_two_request_transfer_pipeline():
    w = _worker()
    w.load_model("m1", RESNET)
    w.load_model("m2", RESNET)
    first = w.admit(InferenceRequest("a", "t", "m1"), 0.0)
    second = w.admit(InferenceRequest("b", "t", "m2"), 0.0)
    assert first.estimate.total_ms == pytest.approx(7.47, abs=1e-12)
    assert second.estimate.total_ms == pytest.approx(13.97, abs=1e-12)
    recs = {r.request_id: r for r in drain(w, 0.0)}
    assert recs["b"].finish_time == pytest.approx(13.97, abs=1e-12)
