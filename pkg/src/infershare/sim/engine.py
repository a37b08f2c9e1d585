"""Discrete-event driver for a whole cluster.

Workers and the controller are the same passive cores the network server
uses; this module supplies virtual time, virtual device durations, failures,
heartbeats and demand windows, and writes every observable event to a trace.
The report is then folded from that trace alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from ..config import Scenario
from ..controller import Action, Controller, WorkerView, transfer_view
from ..errors import ConfigInvalid, ManifestError, ModelTooLarge, ModelUnavailable, UnknownModel
from ..lifecycle import InferenceRequest, RequestState, Residency
from ..manifest import ModelManifest, bundled_manifest, bundled_manifest_names, load_manifest
from ..predictor import DeviceProfile, predict_transfer
from ..worker import EXECUTE, Stage, Worker
from .events import EventQueue
from .metrics import MetricsReport, compute_report
from .workload import WorkloadSpec, forced_misses, generate_arrivals, stream


def resolve_manifest(ref: str, base_dir: Path | None = None) -> ModelManifest:
    if ref in bundled_manifest_names():
        return bundled_manifest(ref)
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        return load_manifest(path)
    except FileNotFoundError:
        raise ConfigInvalid(f"model manifest {ref!r} is neither bundled nor a file") from None
    except ManifestError as exc:
        raise ConfigInvalid(f"model manifest {ref!r}: {exc}") from None


@dataclass
class _Node:
    """Simulator-side handle on one worker process (or one dedicated VM)."""

    worker_id: str
    profile: DeviceProfile
    host_cache_bytes: int
    core: Worker
    gen: int = 0
    failed: bool = False
    exec_busy: float = 0.0          # since the last heartbeat
    tenant: str | None = None       # vm mode: the owning tenant
    model: str | None = None
    vm_up: bool = True
    last_activity: float = 0.0
    idle_token: int = 0


@dataclass
class SimResult:
    report: MetricsReport
    trace: list[dict] = field(default_factory=list)


class Simulation:
    def __init__(self, scenario: Scenario, *, seed: int | None = None, base_dir: Path | None = None,
                 noise: bool | None = None):
        if seed is not None:
            scenario = scenario.with_seed(seed)
        self.sc = scenario
        self.cfg = scenario.cluster
        self.noise = self.cfg.noise if noise is None else noise
        self.q = EventQueue()
        self.trace: list[dict] = []
        self.manifests = {m.model_id: resolve_manifest(m.manifest, base_dir) for m in scenario.models}
        self.tenant_of = {m.model_id: m.tenant_id for m in scenario.models}
        self.nodes: dict[str, _Node] = {}
        self.controller = Controller(
            utilization_target=self.cfg.utilization_target,
            saturation_threshold=self.cfg.saturation_threshold,
            demand_decay=self.cfg.demand_decay,
            heartbeat_ms=self.cfg.heartbeat_ms,
            min_replicas=self.cfg.min_replicas,
        )
        self._noise_rng: dict[str, np.random.Generator] = {}
        self._seq = 0
        self._arrivals: list[Iterator[tuple[int, float]]] = []
        self._misses: list[list[bool] | None] = []
        self._pending_loads: dict[tuple[str, str], int] = {}
        self.end_ms = scenario.duration_ms

    # ----------------------------------------------------------------- tracing

    def emit(self, **rec) -> None:
        self.trace.append(rec)

    # ------------------------------------------------------------------- setup

    def _new_core(self, worker_id: str, profile: DeviceProfile, host_bytes: int) -> Worker:
        return Worker(
            worker_id, profile, host_bytes,
            policy=self.cfg.policy,
            fair=self.cfg.fair,
            batching=self.cfg.batching,
            admission_ceiling_ms=self.cfg.admission_ceiling_ms,
            tenant_ceiling_ms=self.cfg.tenant_ceiling_ms,
            tenant_weights=self.cfg.tenant_weights,
        )

    def _setup_shared(self) -> None:
        for wd in self.cfg.workers:
            profile = self.cfg.profiles[wd.profile]
            self.nodes[wd.worker_id] = _Node(wd.worker_id, profile, wd.host_cache_bytes,
                                             self._new_core(wd.worker_id, profile, wd.host_cache_bytes))
            self.controller.register_worker(wd.worker_id, profile, wd.host_cache_bytes, 0.0)
            self.emit(ev="worker", t=0.0, worker=wd.worker_id, state="joined")
        for m in self.sc.models:
            _, actions = self.controller.upload_model(m.tenant_id, self.manifests[m.model_id], m.model_id,
                                                      replicas=m.replicas, now=0.0)
            self._run_actions(actions, 0.0)
        self.q.push(self.cfg.heartbeat_ms, ("heartbeat",))
        if self.cfg.autoscale or self.cfg.migrate:
            self.q.push(self.cfg.demand_window_ms, ("demand",))
        if self.cfg.reroute_interval_ms > 0:
            self.q.push(self.cfg.reroute_interval_ms, ("reroute",))
        for f in self.sc.failures:
            self.q.push(f.at_ms, ("fail", f.worker_id))
            if f.rejoin_ms is not None:
                self.q.push(f.rejoin_ms, ("rejoin", f.worker_id))

    def _setup_vm(self) -> None:
        if not self.cfg.workers:
            raise ConfigInvalid("vm mode needs a worker definition naming the VM profile")
        template = self.cfg.workers[0]
        profile = self.cfg.profiles[template.profile]
        for m in self.sc.models:
            wid = f"vm-{m.model_id}"
            node = _Node(wid, profile, template.host_cache_bytes,
                         self._new_core(wid, profile, template.host_cache_bytes),
                         tenant=m.tenant_id, model=m.model_id)
            node.core.load_model(m.model_id, self.manifests[m.model_id], 0.0)
            self.nodes[wid] = node
            self.emit(ev="worker", t=0.0, worker=wid, state="vm-up", tenant=m.tenant_id, model=m.model_id,
                      cost_per_hour=profile.cost_per_hour)
            self._arm_idle(node, 0.0)

    def _setup_workloads(self) -> None:
        for idx, spec in enumerate(self.sc.workloads):
            times = generate_arrivals(spec)
            self._misses.append(forced_misses(len(times), spec.hit_ratio) if spec.hit_ratio is not None else None)
            it = iter(enumerate(times))
            self._arrivals.append(it)
            self._next_arrival(idx)

    def _next_arrival(self, idx: int) -> None:
        nxt = next(self._arrivals[idx], None)
        if nxt is not None:
            self.q.push(nxt[1], ("arrival", idx, nxt[0]))

    # ----------------------------------------------------------------- actions

    def _run_actions(self, actions: list[Action], now: float) -> None:
        for act in actions:
            node = self.nodes.get(act.worker_id)
            if node is None or node.failed:
                continue
            manifest = self.manifests[act.model_id]
            if act.kind == "load":
                try:
                    already = node.core.registered(act.model_id)
                    node.core.load_model(act.model_id, manifest, now)
                except ModelTooLarge:
                    continue
                # bringing weights from the remote store into host memory
                fetch = 0.0 if already else predict_transfer(manifest, node.profile, Residency.COLD)[0]
                self.emit(ev="replica", t=now, model=act.model_id, worker=act.worker_id, action="load")
                self.q.push(now + fetch, ("load_ack", act.worker_id, act.model_id, node.gen))
            else:
                self.emit(ev="replica", t=now, model=act.model_id, worker=act.worker_id, action="removed")
                try:
                    node.core.evict_model(act.model_id, now)
                except UnknownModel:
                    pass

    # ---------------------------------------------------------------- requests

    def _views(self, model_id: str, now: float) -> dict[str, WorkerView]:
        manifest = self.manifests[model_id]
        views = {}
        for wid in self.controller.routing.replicas(model_id):
            node = self.nodes.get(wid)
            if node is None or node.failed:
                continue
            views[wid] = WorkerView(node.core.pending_work_ms(now),
                                    node.core.residency(model_id) == Residency.DEVICE,
                                    transfer_view(manifest, node.profile))
        return views

    def _new_id(self) -> str:
        self._seq += 1
        return f"r{self._seq:08d}"

    def _submit(self, origin: str, tenant: str, model_id: str, batch: int, arrival: float,
                deadline: float | None, force: bool, now: float, exclude: frozenset = frozenset()) -> None:
        """Route and admit; on a deadline rejection, try the next replica once."""
        if self.cfg.mode == "vm":
            node = self.nodes[f"vm-{model_id}"]
            if not node.vm_up:
                self._boot_vm(node, now)
            order = [node.worker_id]
        else:
            try:
                order = [w for w in self.controller.route(model_id, self._views(model_id, now)) if w not in exclude]
            except ModelUnavailable:
                order = []
            order = [w for w in order if not self.nodes[w].failed]
        if not order:
            self.emit(ev="reject", t=now, rid=origin, origin=origin, tenant=tenant, model=model_id,
                      worker=None, reason="ModelUnavailable")
            return
        last = None
        for attempt, wid in enumerate(order[:2]):
            node = self.nodes[wid]
            rid = self._new_id()
            req = InferenceRequest(rid, tenant, model_id, batch, arrival, deadline, None, force)
            try:
                adm = node.core.admit(req, now)
            except UnknownModel:
                last = (rid, wid, "ModelUnavailable", math.nan)
                continue
            if adm.admitted:
                self._origin[rid] = origin
                node.last_activity = now
                self._pump(node, now)
                return
            last = (rid, wid, adm.reason, adm.estimate.total_ms)
            if adm.reason != "WouldMissDeadline":
                break
        rid, wid, reason, est = last
        self.emit(ev="reject", t=now, rid=rid, origin=origin, tenant=tenant, model=model_id, worker=wid,
                  reason=reason, estimate_ms=None if math.isnan(est) else est)

    # ----------------------------------------------------------------- workers

    def _noise_factor(self, node: _Node) -> float:
        rng = self._noise_rng.get(node.worker_id)
        if rng is None:
            rng = self._noise_rng[node.worker_id] = stream(self.sc.seed, "__noise__", node.worker_id)
        sigma = self.cfg.noise_sigma
        return math.exp(sigma * rng.standard_normal() - sigma * sigma / 2.0)

    def _pump(self, node: _Node, now: float) -> None:
        if node.failed:
            return
        for stage in node.core.dispatch(now):
            duration = stage.predicted_ms
            if stage.resource == EXECUTE:
                # the virtual device's true cost is the analytic model; the predictor only learns it
                duration = stage.analytic_ms
                if self.noise:
                    duration *= self._noise_factor(node)
            self.q.push(now + duration, ("stage", node.worker_id, node.gen, stage, duration))
        if node.core.available_at > now and any(True for _ in node.core.active_requests()):
            self.q.push(node.core.available_at, ("wake", node.worker_id, node.gen))

    def _on_stage(self, wid: str, gen: int, stage: Stage, duration: float, now: float) -> None:
        node = self.nodes[wid]
        if node.failed or gen != node.gen:
            return
        records = node.core.complete(stage, now, realized_ms=duration)
        self.emit(ev="stage", worker=wid, resource=stage.resource, start=stage.start, end=now,
                  model=stage.model_id, n=len(stage.request_ids))
        if stage.resource == EXECUTE:
            node.exec_busy += duration
        for rec in records:
            doc = {f.name: getattr(rec, f.name) for f in fields(rec) if f.name != "output"}
            self.emit(ev="done", origin=self._origin.pop(rec.request_id), **doc)
        node.last_activity = now
        self._pump(node, now)
        if node.tenant is not None:
            self._arm_idle(node, now)

    # ---------------------------------------------------------------------- vm

    def _arm_idle(self, node: _Node, now: float) -> None:
        node.idle_token += 1
        self.q.push(now + self.cfg.vm_idle_teardown_ms, ("vm_idle", node.worker_id, node.idle_token))

    def _on_vm_idle(self, wid: str, token: int, now: float) -> None:
        node = self.nodes[wid]
        if token != node.idle_token or not node.vm_up:
            return
        if any(True for _ in node.core.active_requests()) or now - node.last_activity < self.cfg.vm_idle_teardown_ms:
            self._arm_idle(node, now)
            return
        node.vm_up = False
        node.gen += 1
        self.emit(ev="worker", t=now, worker=wid, state="vm-down")

    def _boot_vm(self, node: _Node, now: float) -> None:
        node.core = self._new_core(node.worker_id, node.profile, node.host_cache_bytes)
        node.core.load_model(node.model, self.manifests[node.model], now)
        node.core.hold_until(now + self.cfg.vm_cold_start_ms)
        node.vm_up = True
        node.gen += 1
        self.emit(ev="worker", t=now, worker=node.worker_id, state="vm-up", tenant=node.tenant,
                  model=node.model, cost_per_hour=node.profile.cost_per_hour)
        self._arm_idle(node, now)

    # --------------------------------------------------------------- cluster

    def _on_heartbeat(self, now: float) -> None:
        interval = self.cfg.heartbeat_ms
        for wid, node in sorted(self.nodes.items()):
            if node.failed:
                continue
            self.controller.heartbeat(wid, now, load=min(1.0, node.exec_busy / interval))
            node.exec_busy = 0.0
        for wid in self.controller.check_heartbeats(now):
            self.emit(ev="worker", t=now, worker=wid, state="detected")
            for mid, entry in sorted(self.controller.registry.items()):
                if wid in entry.replicas:
                    self.emit(ev="replica", t=now, model=mid, worker=wid, action="removed")
            self._run_actions(self.controller.handle_worker_failure(wid, now), now)
        if now + interval <= self.end_ms:
            self.q.push(now + interval, ("heartbeat",))

    def _on_demand(self, now: float) -> None:
        window = self.cfg.demand_window_ms
        before = {m: e.target for m, e in self.controller.registry.items()}
        actions = self.controller.demand_tick(window, now, autoscale=self.cfg.autoscale)
        for mid, e in sorted(self.controller.registry.items()):
            if e.target != before.get(mid):
                self.emit(ev="scale", t=now, model=mid, demand=e.demand_ewma, target=e.target)
        if self.cfg.migrate:
            for wid in self.controller.saturated_workers():
                plan = self.controller.migrate_for_saturation(wid)
                actions += self.controller.apply_migration(plan)
        self._run_actions(actions, now)
        if now + window <= self.end_ms:
            self.q.push(now + window, ("demand",))

    def _on_fail(self, wid: str, now: float) -> None:
        node = self.nodes[wid]
        if node.failed:
            return
        lost = node.core.fail(now)
        node.failed = True
        node.gen += 1
        self.emit(ev="worker", t=now, worker=wid, state="failed")
        for req in sorted(lost, key=lambda r: r.request_id):
            origin = self._origin.pop(req.request_id)
            self.emit(ev="reroute", t=now, rid=req.request_id, origin=origin, tenant=req.tenant_id,
                      model=req.model_id, worker=wid)
            # the router saw the connection drop: retry elsewhere under a new request id
            self._submit(origin, req.tenant_id, req.model_id, req.batch, req.arrival_time,
                         req.deadline_ms, False, now, exclude=frozenset({wid}))

    def _on_rejoin(self, wid: str, now: float) -> None:
        node = self.nodes[wid]
        node.core = self._new_core(wid, node.profile, node.host_cache_bytes)
        node.failed = False
        node.gen += 1
        self.controller.register_worker(wid, node.profile, node.host_cache_bytes, now)
        self.emit(ev="worker", t=now, worker=wid, state="joined")

    def _on_reroute(self, now: float) -> None:
        for wid, node in sorted(self.nodes.items()):
            if node.failed:
                continue
            for d in node.core.reroute_check(now):
                if d.action != "cancel-and-reroute":
                    continue
                req = node.core._tracked[d.request_id].request
                if not node.core.cancel(d.request_id, now, RequestState.REROUTED):
                    continue
                origin = self._origin.pop(d.request_id)
                self.emit(ev="reroute", t=now, rid=d.request_id, origin=origin, tenant=req.tenant_id,
                          model=req.model_id, worker=wid)
                self._submit(origin, req.tenant_id, req.model_id, req.batch, req.arrival_time,
                             req.deadline_ms, req.force_transfer, now, exclude=frozenset({wid}))
            self._pump(node, now)
        if now + self.cfg.reroute_interval_ms <= self.end_ms:
            self.q.push(now + self.cfg.reroute_interval_ms, ("reroute",))

    # --------------------------------------------------------------------- run

    def run(self) -> SimResult:
        self._origin: dict[str, str] = {}
        self.emit(ev="meta", scenario=self.sc.name, seed=self.sc.seed, mode=self.cfg.mode,
                  duration_ms=self.sc.duration_ms, noise=self.noise)
        if self.cfg.mode == "vm":
            self._setup_vm()
        else:
            self._setup_shared()
        self._setup_workloads()
        while len(self.q):
            now, event = self.q.pop()
            kind = event[0]
            if kind == "arrival":
                _, idx, i = event
                spec: WorkloadSpec = self.sc.workloads[idx]
                origin = f"{idx}:{i}"
                misses = self._misses[idx]
                self.emit(ev="arrival", t=now, origin=origin, tenant=spec.tenant_id, model=spec.model_id,
                          deadline_ms=spec.deadline_ms)
                if self.cfg.mode != "vm":
                    self.controller.record_demand(spec.model_id)
                self._submit(origin, spec.tenant_id, spec.model_id, spec.batch, now, spec.deadline_ms,
                             bool(misses and misses[i]), now)
                self._next_arrival(idx)
            elif kind == "stage":
                _, wid, gen, stage, duration = event
                self._on_stage(wid, gen, stage, duration, now)
            elif kind == "wake":
                _, wid, gen = event
                node = self.nodes[wid]
                if gen == node.gen:
                    self._pump(node, now)
            elif kind == "load_ack":
                _, wid, mid, gen = event
                node = self.nodes[wid]
                if node.failed or gen != node.gen:
                    continue
                follow = self.controller.ack_load(wid, mid, now)
                self.emit(ev="replica", t=now, model=mid, worker=wid, action="routable")
                self._run_actions(follow, now)
            elif kind == "heartbeat":
                self._on_heartbeat(now)
            elif kind == "demand":
                self._on_demand(now)
            elif kind == "fail":
                self._on_fail(event[1], now)
            elif kind == "rejoin":
                self._on_rejoin(event[1], now)
            elif kind == "reroute":
                self._on_reroute(now)
            elif kind == "vm_idle":
                if now <= max(self.end_ms, self._last_arrival()):
                    self._on_vm_idle(event[1], event[2], now)
        self.emit(ev="end", t=max(self.q.now, self.end_ms))
        report = compute_report(self.trace)
        thrash = sum(1 for n in self.nodes.values() for w in n.core.warnings if w.startswith("CacheThrash"))
        if thrash:
            report.warnings.append(f"CacheThrash: {thrash} evictions of recently used models")
        return SimResult(report, self.trace)

    def _last_arrival(self) -> float:
        return self.sc.duration_ms


def run_simulation(scenario: Scenario, seed: int | None = None, *, trace_path: str | Path | None = None,
                   noise: bool | None = None, base_dir: Path | None = None) -> MetricsReport:
    sim = Simulation(scenario, seed=seed, noise=noise, base_dir=base_dir)
    result = sim.run()
    if trace_path is not None:
        write_trace(result.trace, trace_path)
    return result.report


def trace_lines(trace: list[dict]) -> Iterator[str]:
    for rec in trace:
        yield json.dumps(rec, sort_keys=True, allow_nan=False) + "\n"


def write_trace(trace: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.writelines(trace_lines(trace))
