"""Latency prediction and serving economics.

Execution cost comes from manifest flops divided by a device's effective
rate, refined by measurement once enough samples exist. Transfer cost is
footprint over link bandwidth. Both are deterministic, which is what makes
completion-time estimates trustworthy.
"""
from __future__ import annotations

import csv
import io
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Mapping

from .errors import BatchTooLarge, UnknownModel
from .lifecycle import InferenceRequest, PendingItem, Residency, WorkerQueueSnapshot
from .manifest import ModelManifest, model_flops
from .scheduling import policy_key

DEVICE_KINDS = ("cpu-reference", "virtual-cpu-core", "virtual-gpu", "virtual-accelerator")
EXEC_FLOOR_MS = 0.01
CALIBRATION_DECAY = 0.05
CALIBRATION_MIN_SAMPLES = 10
Z99 = 2.3263478740408408  # standard normal 0.99 quantile


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    kind: str
    effective_flops_per_sec: float
    device_memory_bytes: int
    host_to_device_bandwidth: float
    fetch_bandwidth: float
    cost_per_hour: float
    max_batch: int = 1
    batch_efficiency: tuple[tuple[int, float], ...] = ((1, 1.0),)

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise ValueError(f"unknown device kind {self.kind!r}")
        for name in ("effective_flops_per_sec", "device_memory_bytes", "host_to_device_bandwidth",
                     "fetch_bandwidth", "max_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.cost_per_hour < 0:
            raise ValueError("cost_per_hour must be non-negative")
        table = tuple(sorted((int(b), float(m)) for b, m in self.batch_efficiency))
        object.__setattr__(self, "batch_efficiency", table)
        if not table or table[0] != (1, 1.0):
            raise ValueError("batch_efficiency must start at (1, 1.0)")
        if any(m2 < m1 for (_, m1), (_, m2) in zip(table, table[1:])):
            raise ValueError("batch_efficiency must be non-decreasing")

    def efficiency(self, batch: int) -> float:
        """Throughput multiplier, piecewise-linear in log(batch), flat past the table."""
        table = self.batch_efficiency
        batches = [b for b, _ in table]
        i = bisect_right(batches, batch) - 1
        if i >= len(table) - 1:
            return table[-1][1]
        (b0, m0), (b1, m1) = table[i], table[i + 1]
        frac = (math.log(batch) - math.log(b0)) / (math.log(b1) - math.log(b0))
        return m0 + frac * (m1 - m0)

    def to_document(self) -> dict:
        return {
            "device_id": self.device_id,
            "kind": self.kind,
            "effective_flops_per_sec": self.effective_flops_per_sec,
            "device_memory_bytes": self.device_memory_bytes,
            "host_to_device_bandwidth": self.host_to_device_bandwidth,
            "fetch_bandwidth": self.fetch_bandwidth,
            "cost_per_hour": self.cost_per_hour,
            "max_batch": self.max_batch,
            "batch_efficiency": [list(p) for p in self.batch_efficiency],
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "DeviceProfile":
        doc = dict(doc)
        doc["batch_efficiency"] = tuple(tuple(p) for p in doc.get("batch_efficiency", [(1, 1.0)]))
        return cls(**doc)


def calibrated_rate(reference: ModelManifest, latency_ms: float, batch: int = 1) -> float:
    """Effective flops/s that makes ``reference`` take ``latency_ms`` at ``batch``."""
    return model_flops(reference, batch) / (latency_ms / 1000.0)


@dataclass(frozen=True)
class LatencyEstimate:
    fetch_ms: float
    transfer_ms: float
    exec_ms: float
    queue_ms: float
    confidence_p99_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.fetch_ms + self.transfer_ms + self.exec_ms + self.queue_ms

    def to_document(self) -> dict:
        return {
            "fetch_ms": self.fetch_ms,
            "transfer_ms": self.transfer_ms,
            "exec_ms": self.exec_ms,
            "queue_ms": self.queue_ms,
            "total_ms": self.total_ms,
            "confidence_p99_ms": self.confidence_p99_ms,
        }


@dataclass
class CalibrationEntry:
    ewma: float = 0.0
    variance: float = 0.0
    count: int = 0


@dataclass
class CalibrationState:
    """EWMA mean/variance of observed execution time per (model, device, batch)."""

    decay: float = CALIBRATION_DECAY
    entries: dict[tuple[str, str, int], CalibrationEntry] = field(default_factory=dict)

    def get(self, key) -> CalibrationEntry | None:
        return self.entries.get(key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "device_id", "batch", "ewma_ms", "variance_ms2", "samples"])
        for (model, device, batch), e in sorted(self.entries.items()):
            w.writerow([model, device, batch, repr(e.ewma), repr(e.variance), e.count])
        return buf.getvalue()


def update_calibration(cal: CalibrationState, key, observed_exec_ms: float) -> CalibrationState:
    if not observed_exec_ms > 0:
        raise ValueError("observed execution time must be positive")
    entry = cal.entries.get(key)
    if entry is None:
        cal.entries[key] = CalibrationEntry(observed_exec_ms, 0.0, 1)
        return cal
    diff = observed_exec_ms - entry.ewma
    incr = cal.decay * diff
    entry.ewma = entry.ewma + incr
    entry.variance = (1.0 - cal.decay) * (entry.variance + diff * incr)
    entry.count += 1
    return cal


def analytic_exec_ms(manifest: ModelManifest, device: DeviceProfile, batch: int = 1) -> float:
    if batch > device.max_batch:
        raise BatchTooLarge(f"batch {batch} exceeds {device.device_id} max_batch {device.max_batch}")
    rate = device.effective_flops_per_sec * device.efficiency(batch)
    return max(EXEC_FLOOR_MS, model_flops(manifest, batch) / rate * 1000.0)


def predict_exec(manifest: ModelManifest, device: DeviceProfile, batch: int = 1,
                 cal: CalibrationState | None = None, model_id: str | None = None) -> float:
    analytic = analytic_exec_ms(manifest, device, batch)
    if cal is not None:
        entry = cal.get((model_id or manifest.model_name, device.device_id, batch))
        if entry is not None and entry.count >= CALIBRATION_MIN_SAMPLES:
            return max(EXEC_FLOOR_MS, entry.ewma)
    return analytic


def exec_stddev(manifest: ModelManifest, device: DeviceProfile, batch: int = 1,
                cal: CalibrationState | None = None, model_id: str | None = None) -> float:
    if cal is None:
        return 0.0
    entry = cal.get((model_id or manifest.model_name, device.device_id, batch))
    if entry is None or entry.count < CALIBRATION_MIN_SAMPLES:
        return 0.0
    return math.sqrt(entry.variance)


def predict_transfer(manifest: ModelManifest, device: DeviceProfile, residency: Residency | str) -> tuple[float, float]:
    """(fetch_ms, transfer_ms) needed to bring the model onto the device."""
    residency = Residency(residency)
    if residency in (Residency.DEVICE, Residency.INFLIGHT):
        return 0.0, 0.0
    transfer = manifest.declared_footprint_bytes / device.host_to_device_bandwidth * 1000.0
    if residency == Residency.HOST:
        return 0.0, transfer
    return manifest.declared_footprint_bytes / device.fetch_bandwidth * 1000.0, transfer


def _work_ahead(items, policy: str, fair: bool, me: PendingItem) -> float:
    """Predicted work the policy serves before ``me`` among ``items``."""
    key = policy_key(policy, me)
    mine = [it for it in items if it.tenant_id == me.tenant_id and policy_key(policy, it) < key]
    work = sum(it.work_ms for it in mine)
    if not fair:
        return work + sum(it.work_ms for it in items
                          if it.tenant_id != me.tenant_id and policy_key(policy, it) < key)
    # round-robin: each other tenant gets one turn per turn of ours
    turns = len(mine) + 1
    by_tenant: dict[str, list[PendingItem]] = {}
    for it in items:
        if it.tenant_id != me.tenant_id:
            by_tenant.setdefault(it.tenant_id, []).append(it)
    for theirs in by_tenant.values():
        theirs.sort(key=lambda it: policy_key(policy, it))
        work += sum(it.work_ms for it in theirs[:turns])
    return work


def estimate_completion(request: InferenceRequest, worker_view: WorkerQueueSnapshot,
                        cal: CalibrationState | None = None) -> LatencyEstimate:
    """Predicted latency components for ``request`` if admitted now."""
    snap = worker_view
    manifest = snap.models.get(request.model_id)
    if manifest is None:
        raise UnknownModel(request.model_id)
    device = snap.device
    now = snap.timestamp
    residency = snap.residency.get(request.model_id, Residency.COLD)
    if request.force_transfer and residency == Residency.DEVICE:
        residency = Residency.HOST
    exec_ms = predict_exec(manifest, device, request.batch, cal, request.model_id)
    fetch_ms, transfer_ms = predict_transfer(manifest, device, residency)
    fifo = snap.policy == "fifo" and not snap.fair
    me_exec = PendingItem(request.request_id, request.tenant_id, request.model_id, request.arrival_time,
                          request.absolute_deadline, exec_ms, now)

    if residency == Residency.DEVICE:
        ready = now
        transfer_wait = 0.0
    elif residency == Residency.INFLIGHT:
        ready = max(now, snap.inflight_ready.get(request.model_id, now))
        transfer_wait = ready - now
    else:
        if fifo:
            start = max(now, snap.transfer_free_at)
        else:
            me_xfer = PendingItem(request.request_id, request.tenant_id, request.model_id,
                                  request.arrival_time, request.absolute_deadline, fetch_ms + transfer_ms, now)
            start = max(now, snap.transfer_busy_until) + _work_ahead(
                snap.transfer_pending, snap.policy, snap.fair, me_xfer)
        transfer_wait = start - now
        ready = start + fetch_ms + transfer_ms

    if fifo:
        exec_start = max(ready, snap.execute_free_at)
    else:
        exec_start = max(ready, max(now, snap.execute_busy_until) + _work_ahead(
            snap.execute_pending, snap.policy, snap.fair, me_exec))
    queue_ms = transfer_wait + (exec_start - ready)
    sd = exec_stddev(manifest, device, request.batch, cal, request.model_id)
    est = LatencyEstimate(fetch_ms, transfer_ms, exec_ms, queue_ms)
    return LatencyEstimate(fetch_ms, transfer_ms, exec_ms, queue_ms, est.total_ms + Z99 * sd)


def cost_per_million(device: DeviceProfile, sustained_throughput: float) -> float:
    """Cost of one million inferences at ``sustained_throughput`` inf/s."""
    if not sustained_throughput > 0:
        raise ValueError("throughput must be positive")
    return device.cost_per_hour / (sustained_throughput * 3600.0) * 1e6


def breakeven_hit_ratio(manifest: ModelManifest, device: DeviceProfile, cal: CalibrationState | None = None) -> float:
    """Smallest device-cache hit ratio at which execution, not the copy link, is the bottleneck."""
    _, transfer_ms = predict_transfer(manifest, device, Residency.HOST)
    exec_ms = predict_exec(manifest, device, 1, cal)
    return breakeven_from_times(exec_ms, transfer_ms)


def breakeven_from_times(exec_ms: float, transfer_ms: float) -> float:
    if not transfer_ms > 0:
        raise ValueError("transfer time must be positive")
    return max(0.0, 1.0 - exec_ms / transfer_ms)


def lognormal_sigma_for_ratio(p99_over_mean: float) -> float:
    """Sigma of a mean-one lognormal whose 99th percentile is ``p99_over_mean``.

    Solves exp(z*s - s^2/2) = r for the smaller root.
    """
    r = math.log(p99_over_mean)
    return Z99 - math.sqrt(Z99 * Z99 - 2.0 * r)


# ---------------------------------------------------------------------------
# reference profiles reproducing the measured resnet18 latencies and prices

GPU_LATENCY_MS = 0.97
CPU_LATENCY_MS = 190.80
GPU_COST_PER_HOUR = 2.55
CPU_COST_PER_HOUR = 0.0348
PCIE_BANDWIDTH = 12e9
GPU_BATCHED_THROUGHPUT = 4083.0
GPU_BATCH = 256


def reference_profiles(reference: ModelManifest | None = None) -> dict[str, DeviceProfile]:
    if reference is None:
        from .manifest import bundled_manifest
        reference = bundled_manifest("resnet18")
    gpu_rate = calibrated_rate(reference, GPU_LATENCY_MS)
    single = 1000.0 / GPU_LATENCY_MS
    return {
        "v100": DeviceProfile(
            device_id="v100",
            kind="virtual-gpu",
            effective_flops_per_sec=gpu_rate,
            device_memory_bytes=16 * 10**9,
            host_to_device_bandwidth=PCIE_BANDWIDTH,
            fetch_bandwidth=1e9,
            cost_per_hour=GPU_COST_PER_HOUR,
            max_batch=GPU_BATCH,
            batch_efficiency=((1, 1.0), (GPU_BATCH, GPU_BATCHED_THROUGHPUT / single)),
        ),
        "cpu-core": DeviceProfile(
            device_id="cpu-core",
            kind="virtual-cpu-core",
            effective_flops_per_sec=calibrated_rate(reference, CPU_LATENCY_MS),
            device_memory_bytes=8 * 10**9,
            host_to_device_bandwidth=20e9,
            fetch_bandwidth=1e9,
            cost_per_hour=CPU_COST_PER_HOUR,
            max_batch=1,
        ),
    }
