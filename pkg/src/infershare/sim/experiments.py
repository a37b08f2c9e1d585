"""Scenario-level analyses: hit-ratio sweep, isolation oracle, scaling and recovery timings."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from ..config import Scenario
from ..predictor import predict_exec, predict_transfer
from .engine import Simulation, resolve_manifest
from .metrics import nearest_rank
from .workload import generate_arrivals


@dataclass(frozen=True)
class SweepPoint:
    hit_ratio: float
    throughput: float          # completed inf/s
    exec_util: float
    transfer_util: float


def sweep_grid(sweep: dict) -> list[float]:
    start, stop, step = sweep.get("start", 0.5), sweep.get("stop", 1.0), sweep.get("step", 0.01)
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def hit_ratio_sweep(scenario: Scenario, grid: list[float] | None = None) -> list[SweepPoint]:
    grid = sweep_grid(scenario.sweep) if grid is None else grid
    worker = scenario.cluster.workers[0].worker_id
    points = []
    for h in grid:
        sc = replace(scenario, workloads=tuple(replace(w, hit_ratio=h) for w in scenario.workloads))
        res = Simulation(sc).run()
        rep = res.report
        points.append(SweepPoint(h, sustained_throughput(res.trace), rep.util(worker, "execute"),
                                 rep.util(worker, "transfer")))
    return points


def sustained_throughput(trace: list[dict]) -> float:
    """Completions per second between the first arrival and the last completion."""
    first = next((r["t"] for r in trace if r["ev"] == "arrival"), None)
    finishes = [r["finish_time"] for r in trace if r["ev"] == "done"]
    if first is None or not finishes or max(finishes) <= first:
        return 0.0
    return len(finishes) / ((max(finishes) - first) / 1000.0)


def crossover(points: list[SweepPoint]) -> float:
    """Hit ratio where execute utilisation overtakes transfer utilisation (linear interpolation)."""
    for a, b in zip(points, points[1:]):
        da, db = a.exec_util - a.transfer_util, b.exec_util - b.transfer_util
        if da <= 0 < db or da < 0 <= db:
            return a.hit_ratio + (b.hit_ratio - a.hit_ratio) * (-da) / (db - da)
    return math.nan


# ---------------------------------------------------------------------------
# isolation


def victim_latencies(trace: list[dict], tenant: str, after_ms: float) -> list[float]:
    return sorted(r["finish_time"] - r["arrival_time"] for r in trace
                  if r["ev"] == "done" and r["tenant_id"] == tenant and r["arrival_time"] >= after_ms)


def isolation_oracle(scenario: Scenario, victim: str, aggressor: str, after_ms: float) -> float:
    """p99 victim latency against an always-backlogged aggressor under 1:1 round-robin.

    Each victim job starts only after one full aggressor job (the worst-case
    residual when it arrives, or the aggressor's turn after the previous
    victim job). Computed from the victim's own arrivals, independently of
    the scheduler implementation.
    """
    vspec = next(w for w in scenario.workloads if w.tenant_id == victim)
    aspec = next(w for w in scenario.workloads if w.tenant_id == aggressor)
    device = scenario.cluster.profiles[scenario.cluster.workers[0].profile]
    models = {m.model_id: m for m in scenario.models}
    ev = predict_exec(resolve_manifest(models[vspec.model_id].manifest), device, vspec.batch)
    ea = predict_exec(resolve_manifest(models[aspec.model_id].manifest), device, aspec.batch)
    finish = -math.inf
    lats = []
    for t in generate_arrivals(vspec):
        finish = max(t, finish) + ea + ev
        if t >= after_ms:
            lats.append(finish - t)
    return nearest_rank(sorted(lats), 99)


# ---------------------------------------------------------------------------
# elasticity


def burst_bound_ms(scenario: Scenario, model_id: str) -> float:
    """admission ceiling + one host->device copy + one execution, from the predictor."""
    m = next(m for m in scenario.models if m.model_id == model_id)
    manifest = resolve_manifest(m.manifest)
    device = scenario.cluster.profiles[scenario.cluster.workers[0].profile]
    return (scenario.cluster.admission_ceiling_ms + predict_transfer(manifest, device, "host-hit")[1]
            + predict_exec(manifest, device, 1))


def load_time_ms(scenario: Scenario, model_id: str) -> float:
    m = next(m for m in scenario.models if m.model_id == model_id)
    manifest = resolve_manifest(m.manifest)
    device = scenario.cluster.profiles[scenario.cluster.workers[0].profile]
    return predict_transfer(manifest, device, "cold")[0]


def replica_counts(trace: list[dict], model_id: str) -> list[tuple[float, int]]:
    """(time, routable replica count) after every change."""
    live: set[str] = set()
    out = []
    for r in trace:
        if r["ev"] == "replica" and r["model"] == model_id:
            if r["action"] == "routable":
                live.add(r["worker"])
            elif r["action"] == "removed":
                live.discard(r["worker"])
            else:
                continue
            out.append((r["t"], len(live)))
    return out


def time_to_reach(trace: list[dict], model_id: str, count: int, after: float) -> float:
    for t, n in replica_counts(trace, model_id):
        if t >= after and n >= count:
            return t - after
    return math.inf


def scale_targets(trace: list[dict], model_id: str) -> list[tuple[float, int]]:
    return [(r["t"], r["target"]) for r in trace if r["ev"] == "scale" and r["model"] == model_id]


def window_p99(trace: list[dict], model_id: str, t0: float, t1: float) -> float:
    lats = sorted(r["finish_time"] - r["arrival_time"] for r in trace
                  if r["ev"] == "done" and r["model_id"] == model_id and t0 <= r["arrival_time"] < t1)
    return nearest_rank(lats, 99)


# ---------------------------------------------------------------------------
# failover


def recovery_times(trace: list[dict]) -> dict[str, float]:
    """Per model: time from failure detection until the replica count is back to its pre-failure value."""
    detected = [r for r in trace if r["ev"] == "worker" and r["state"] == "detected"]
    if not detected:
        return {}
    t_detect = detected[0]["t"]
    failed = detected[0]["worker"]
    t_fail = next(r["t"] for r in trace if r["ev"] == "worker" and r["state"] == "failed" and r["worker"] == failed)
    models = sorted({r["model"] for r in trace if r["ev"] == "replica"})
    out = {}
    for mid in models:
        counts = replica_counts(trace, mid)
        before = [n for t, n in counts if t <= t_fail]
        target = before[-1] if before else 0
        hosted = any(r["ev"] == "replica" and r["model"] == mid and r["worker"] == failed
                     and r["action"] == "routable" and r["t"] <= t_fail for r in trace)
        if not hosted:
            continue
        t_back = next((t for t, n in counts if t >= t_detect and n >= target), math.inf)
        out[mid] = t_back - t_detect
    return out
