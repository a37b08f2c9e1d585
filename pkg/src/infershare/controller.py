"""Logically centralised controller: registry, placement, scaling, routing, recovery.

The controller is a passive state owner. Methods return :class:`Action` lists
(load or evict a model on a worker) that the driver carries out, then reports
back with :meth:`Controller.ack_load`. The simulator and the network server
share this contract.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    InsufficientCapacity,
    ModelUnavailable,
    QuotaExceeded,
    ValidationFailed,
)
from .manifest import ModelManifest, parse_manifest, serialize_manifest, validate_manifest
from .predictor import DeviceProfile, predict_exec, predict_transfer

UTILIZATION_TARGET = 0.8
SATURATION_THRESHOLD = 0.7
DEMAND_DECAY = 0.3
HEARTBEAT_MS = 500.0
MISSED_HEARTBEATS = 3
JOURNAL_MAGIC = b"ISJ1"
JOURNAL_VERSION = 1


@dataclass
class RegistryEntry:
    model_id: str
    tenant_id: str
    manifest: ModelManifest
    replicas: list[str] = field(default_factory=list)     # acked, routable
    loading: list[str] = field(default_factory=list)      # load issued, not yet acked
    demand_ewma: float = 0.0
    state: str = "registering"       # registering | active | migrating | deleted
    min_replicas: int = 1
    target: int = 1


@dataclass
class WorkerInfo:
    worker_id: str
    device: DeviceProfile
    host_cache_bytes: int
    load_ewma: float = 0.0
    resident: set[str] = field(default_factory=set)
    last_heartbeat: float = 0.0
    failed: bool = False

    def host_bytes_used(self, registry: Mapping[str, RegistryEntry]) -> int:
        return sum(registry[m].manifest.declared_footprint_bytes for m in self.resident if m in registry)


@dataclass(frozen=True)
class RoutingTable:
    version: int
    routes: Mapping[str, tuple[str, ...]]

    def replicas(self, model_id: str) -> tuple[str, ...]:
        return self.routes.get(model_id, ())


@dataclass(frozen=True)
class Action:
    kind: str            # "load" | "evict"
    worker_id: str
    model_id: str


@dataclass
class MigrationPlan:
    worker_id: str
    heavy_model: str | None
    moves: list[tuple[str, str, str]] = field(default_factory=list)   # (model, source, target)
    unplaced: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.unplaced)

    @property
    def empty(self) -> bool:
        return not self.moves and not self.unplaced


@dataclass(frozen=True)
class WorkerView:
    """What a router knows about one replica when picking a target."""

    pending_ms: float
    device_resident: bool
    transfer_ms: float = 0.0


class Router:
    """Applies routing tables (newer versions only) and orders replicas for a request."""

    def __init__(self):
        self.table = RoutingTable(0, {})

    def apply(self, table: RoutingTable) -> bool:
        if table.version <= self.table.version:
            return False
        self.table = table
        return True

    def candidates(self, model_id: str, views: Mapping[str, WorkerView]) -> list[str]:
        replicas = self.table.replicas(model_id)
        if not replicas:
            raise ModelUnavailable(model_id)
        return order_replicas(replicas, views)


def order_replicas(replicas: Iterable[str], views: Mapping[str, WorkerView]) -> list[str]:
    """Least predicted start delay first: pending work plus the copy a non-resident replica needs."""
    def key(wid):
        v = views.get(wid)
        if v is None:
            return (math.inf, wid)
        return (v.pending_ms + (0.0 if v.device_resident else v.transfer_ms), wid)
    return sorted(replicas, key=key)


def replica_throughput(manifest: ModelManifest, device: DeviceProfile) -> float:
    """Sustained single-request throughput (inf/s) of one replica."""
    return 1000.0 / predict_exec(manifest, device, 1)


def target_replicas(demand: float, throughput: float, min_replicas: int = 1,
                    utilization_target: float = UTILIZATION_TARGET) -> int:
    if demand <= 0:
        return min_replicas
    return max(min_replicas, math.ceil(demand / (utilization_target * throughput) - 1e-9))


class Journal:
    """Append-only log of controller mutations: magic, then (u32 length, JSON record) pairs."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_bytes(JOURNAL_MAGIC)

    def append(self, record: dict) -> None:
        body = json.dumps({"v": JOURNAL_VERSION, **record}, sort_keys=True).encode()
        with self.path.open("ab") as fh:
            fh.write(struct.pack(">I", len(body)) + body)

    def records(self) -> list[dict]:
        data = self.path.read_bytes()
        if data[:4] != JOURNAL_MAGIC:
            raise ValueError(f"{self.path}: not a controller journal")
        out, pos = [], 4
        while pos + 4 <= len(data):
            (n,) = struct.unpack_from(">I", data, pos)
            if pos + 4 + n > len(data):
                break          # torn tail write: ignore the partial record
            rec = json.loads(data[pos + 4:pos + 4 + n])
            if rec.get("v", 0) > JOURNAL_VERSION:
                raise ValueError(f"journal record version {rec['v']} is newer than supported")
            out.append(rec)
            pos += 4 + n
        return out


class Controller:
    def __init__(
        self,
        *,
        utilization_target: float = UTILIZATION_TARGET,
        saturation_threshold: float = SATURATION_THRESHOLD,
        demand_decay: float = DEMAND_DECAY,
        heartbeat_ms: float = HEARTBEAT_MS,
        min_replicas: int = 1,
        quotas: Mapping[str, Mapping[str, int]] | None = None,
        journal: str | Path | None = None,
    ):
        self.utilization_target = utilization_target
        self.saturation_threshold = saturation_threshold
        self.demand_decay = demand_decay
        self.heartbeat_ms = heartbeat_ms
        self.min_replicas = min_replicas
        self.quotas = dict(quotas or {})
        self.workers: dict[str, WorkerInfo] = {}
        self.registry: dict[str, RegistryEntry] = {}
        self.routing = RoutingTable(0, {})
        self._after_ack: dict[tuple[str, str], list[Action]] = {}
        self._window_counts: dict[str, int] = {}
        self._journal = None
        if journal is not None:
            self._journal = Journal(journal)
            self._replay(self._journal.records())

    # ------------------------------------------------------------------ journal

    def _log(self, **record) -> None:
        if self._journal is not None:
            self._journal.append(record)

    def _replay(self, records: list[dict]) -> None:
        journal, self._journal = self._journal, None
        for rec in records:
            op = rec["op"]
            if op == "register_worker":
                self.register_worker(rec["worker_id"], DeviceProfile.from_document(rec["device"]),
                                     rec["host_cache_bytes"], rec.get("t", 0.0))
            elif op == "upload":
                self._register(rec["model_id"], rec["tenant_id"], parse_manifest(rec["manifest"]),
                               rec.get("min_replicas", self.min_replicas))
            elif op == "ack":
                self._ack(rec["worker_id"], rec["model_id"])
            elif op == "drop_replica":
                self._drop_replica(rec["model_id"], rec["worker_id"])
            elif op == "delete":
                self.registry.pop(rec["model_id"], None)
                for w in self.workers.values():
                    w.resident.discard(rec["model_id"])
            elif op == "worker_failed":
                self._mark_failed(rec["worker_id"])
        self._journal = journal
        self._bump()

    # ------------------------------------------------------------------ workers

    def register_worker(self, worker_id: str, device: DeviceProfile, host_cache_bytes: int,
                        now: float = 0.0) -> None:
        """Add (or re-add after failure, with empty caches) a worker."""
        self.workers[worker_id] = WorkerInfo(worker_id, device, int(host_cache_bytes), last_heartbeat=now)
        self._log(op="register_worker", worker_id=worker_id, device=device.to_document(),
                  host_cache_bytes=int(host_cache_bytes), t=now)

    def heartbeat(self, worker_id: str, now: float, load: float | None = None) -> None:
        w = self.workers[worker_id]
        if w.failed:
            return
        w.last_heartbeat = now
        if load is not None:
            w.load_ewma = self.demand_decay * load + (1.0 - self.demand_decay) * w.load_ewma

    def check_heartbeats(self, now: float) -> list[str]:
        """Workers that just missed MISSED_HEARTBEATS consecutive intervals."""
        limit = MISSED_HEARTBEATS * self.heartbeat_ms
        dead = [wid for wid, w in sorted(self.workers.items())
                if not w.failed and now - w.last_heartbeat > limit + 1e-9]
        return dead

    def live_workers(self) -> list[WorkerInfo]:
        return [w for _, w in sorted(self.workers.items()) if not w.failed]

    # ----------------------------------------------------------------- registry

    def upload_model(self, tenant_id: str, manifest: ModelManifest, model_id: str | None = None,
                     *, replicas: int | None = None, now: float = 0.0) -> tuple[str, list[Action]]:
        report = validate_manifest(manifest)
        if not report.ok:
            raise ValidationFailed(report.findings)
        model_id = model_id or f"{tenant_id}/{manifest.model_name}"
        if model_id in self.registry and self.registry[model_id].state != "deleted":
            raise ValidationFailed([f"DuplicateModel: {model_id} already registered"])
        self._check_quota(tenant_id, manifest)
        k = max(self.min_replicas, replicas or 1)
        entry = self._register(model_id, tenant_id, manifest, k)
        self._log(op="upload", model_id=model_id, tenant_id=tenant_id,
                  manifest=serialize_manifest(manifest), min_replicas=k)
        targets = self.place(manifest, k)
        actions = []
        for wid in targets:
            entry.loading.append(wid)
            actions.append(Action("load", wid, model_id))
        return model_id, actions

    def _register(self, model_id: str, tenant_id: str, manifest: ModelManifest, k: int) -> RegistryEntry:
        entry = RegistryEntry(model_id, tenant_id, manifest, min_replicas=k, target=k)
        self.registry[model_id] = entry
        return entry

    def _check_quota(self, tenant_id: str, manifest: ModelManifest) -> None:
        quota = self.quotas.get(tenant_id) or self.quotas.get("*")
        if not quota:
            return
        mine = [e for e in self.registry.values() if e.tenant_id == tenant_id and e.state != "deleted"]
        if "max_models" in quota and len(mine) + 1 > quota["max_models"]:
            raise QuotaExceeded(f"tenant {tenant_id}: model count quota {quota['max_models']}")
        used = sum(e.manifest.declared_footprint_bytes for e in mine)
        if "max_bytes" in quota and used + manifest.declared_footprint_bytes > quota["max_bytes"]:
            raise QuotaExceeded(f"tenant {tenant_id}: byte quota {quota['max_bytes']}")

    def delete_model(self, model_id: str) -> list[Action]:
        entry = self.registry.get(model_id)
        if entry is None or entry.state == "deleted":
            raise ModelUnavailable(model_id)
        entry.state = "deleted"
        actions = [Action("evict", wid, model_id) for wid in entry.replicas + entry.loading]
        for wid in entry.replicas + entry.loading:
            if wid in self.workers:
                self.workers[wid].resident.discard(model_id)
        entry.replicas.clear()
        entry.loading.clear()
        del self.registry[model_id]
        self._log(op="delete", model_id=model_id)
        self._bump()
        return actions

    def ack_load(self, worker_id: str, model_id: str, now: float = 0.0) -> list[Action]:
        """A worker finished loading; the replica becomes routable. Returns follow-up actions."""
        entry = self.registry.get(model_id)
        worker = self.workers.get(worker_id)
        if entry is None or worker is None or worker.failed or worker_id not in entry.loading:
            # stale ack (model deleted or worker died meanwhile): undo on the worker
            return [Action("evict", worker_id, model_id)] if worker is not None and not worker.failed else []
        self._ack(worker_id, model_id)
        self._log(op="ack", worker_id=worker_id, model_id=model_id, t=now)
        self._bump()
        follow = self._after_ack.pop((model_id, worker_id), [])
        for act in follow:
            self._drop_replica(act.model_id, act.worker_id)
            self._log(op="drop_replica", worker_id=act.worker_id, model_id=act.model_id, t=now)
        if follow:
            self._bump()
        if entry.state == "migrating" and not any(k[0] == model_id for k in self._after_ack):
            entry.state = "active"
        return follow

    def _ack(self, worker_id: str, model_id: str) -> None:
        entry = self.registry[model_id]
        if worker_id in entry.loading:
            entry.loading.remove(worker_id)
        if worker_id not in entry.replicas:
            entry.replicas.append(worker_id)
        self.workers[worker_id].resident.add(model_id)
        if entry.state == "registering":
            entry.state = "active"

    def _drop_replica(self, model_id: str, worker_id: str) -> None:
        entry = self.registry.get(model_id)
        if entry is not None and worker_id in entry.replicas:
            entry.replicas.remove(worker_id)
        if worker_id in self.workers:
            self.workers[worker_id].resident.discard(model_id)

    def _bump(self) -> None:
        routes = {}
        for mid, entry in sorted(self.registry.items()):
            live = tuple(w for w in entry.replicas if w in self.workers and not self.workers[w].failed)
            if live:
                routes[mid] = live
        self.routing = RoutingTable(self.routing.version + 1, routes)

    # ---------------------------------------------------------------- placement

    def _loading_on(self, worker_id: str) -> set[str]:
        return {mid for mid, e in self.registry.items() if worker_id in e.loading}

    def _host_used(self, worker: WorkerInfo) -> int:
        mids = worker.resident | self._loading_on(worker.worker_id)
        return sum(self.registry[m].manifest.declared_footprint_bytes for m in mids if m in self.registry)

    def place(self, manifest: ModelManifest, replica_count: int, exclude: Iterable[str] = (),
              extra_load: Mapping[str, float] | None = None,
              extra_bytes: Mapping[str, int] | None = None) -> list[str]:
        """Greedy: lowest projected load among workers whose host cache fits the model.

        Workers whose device memory can hold the model are preferred; ties break by worker id.
        """
        if replica_count < 1:
            raise ValueError("replica_count must be >= 1")
        excluded = set(exclude)
        nbytes = manifest.declared_footprint_bytes
        extra = dict(extra_load or {})
        claimed = dict(extra_bytes or {})
        candidates = []
        for w in self.live_workers():
            if w.worker_id in excluded:
                continue
            if self._host_used(w) + claimed.get(w.worker_id, 0) + nbytes > w.host_cache_bytes:
                continue
            fits_device = nbytes <= w.device.device_memory_bytes
            candidates.append((not fits_device, w.load_ewma + extra.get(w.worker_id, 0.0), w.worker_id))
        candidates.sort()
        if len(candidates) < replica_count:
            raise InsufficientCapacity(
                f"{manifest.model_name}: {replica_count} replicas requested, {len(candidates)} workers fit",
                [c[2] for c in candidates])
        return [c[2] for c in candidates[:replica_count]]

    # ------------------------------------------------------------------ scaling

    def scale_replicas(self, entry: RegistryEntry) -> int:
        devices = [self.workers[w].device for w in entry.replicas + entry.loading if w in self.workers]
        if not devices:
            devices = [w.device for w in self.live_workers()][:1]
        if not devices:
            return entry.min_replicas
        throughput = min(replica_throughput(entry.manifest, d) for d in devices)
        return target_replicas(entry.demand_ewma, throughput, entry.min_replicas, self.utilization_target)

    def record_demand(self, model_id: str, count: int = 1) -> None:
        self._window_counts[model_id] = self._window_counts.get(model_id, 0) + count

    def demand_tick(self, window_ms: float, now: float = 0.0, *, autoscale: bool = True) -> list[Action]:
        """Close a demand window: update estimates and (optionally) rescale."""
        actions: list[Action] = []
        for mid, entry in sorted(self.registry.items()):
            rate = self._window_counts.get(mid, 0) * 1000.0 / window_ms
            smoothed = self.demand_decay * rate + (1.0 - self.demand_decay) * entry.demand_ewma
            # react to a step up within one window; decay smoothly on the way down
            entry.demand_ewma = max(rate, smoothed)
            if autoscale and entry.state in ("active", "migrating"):
                actions += self._rescale(entry)
        self._window_counts.clear()
        return actions

    def _rescale(self, entry: RegistryEntry) -> list[Action]:
        target = self.scale_replicas(entry)
        entry.target = target
        have = len(entry.replicas) + len(entry.loading)
        actions = []
        if target > have:
            try:
                picks = self.place(entry.manifest, target - have, exclude=entry.replicas + entry.loading)
            except InsufficientCapacity as exc:
                picks = exc.partial
            for wid in picks:
                entry.loading.append(wid)
                actions.append(Action("load", wid, entry.model_id))
        elif target < len(entry.replicas) and not entry.loading:
            # drop the most loaded replicas beyond target; routing flips before the evict
            victims = sorted(entry.replicas, key=lambda w: (-self.workers[w].load_ewma, w))[:len(entry.replicas) - target]
            for wid in victims:
                self._drop_replica(entry.model_id, wid)
                self._log(op="drop_replica", worker_id=wid, model_id=entry.model_id)
                actions.append(Action("evict", wid, entry.model_id))
            self._bump()
        return actions

    # ---------------------------------------------------------------- migration

    def worker_capacity_share(self, worker_id: str, model_id: str) -> float:
        """Fraction of one worker a model's demand needs if it had the worker alone."""
        entry = self.registry[model_id]
        w = self.workers[worker_id]
        per_replica = entry.demand_ewma / max(1, len(entry.replicas))
        return per_replica / replica_throughput(entry.manifest, w.device)

    def migrate_for_saturation(self, worker_id: str) -> MigrationPlan:
        w = self.workers[worker_id]
        models = sorted(m for m in w.resident if m in self.registry)
        shares = {m: self.worker_capacity_share(worker_id, m) for m in models}
        heavy = [m for m in models if shares[m] >= self.saturation_threshold]
        plan = MigrationPlan(worker_id, None)
        if not heavy:
            return plan
        plan.heavy_model = max(heavy, key=lambda m: (shares[m], m))
        movers = sorted((m for m in models if m != plan.heavy_model), key=lambda m: (-shares[m], m))
        extra: dict[str, float] = {}
        claimed: dict[str, int] = {}
        for mid in movers:
            entry = self.registry[mid]
            try:
                (target,) = self.place(entry.manifest, 1, exclude=set(entry.replicas) | set(entry.loading) | {worker_id},
                                       extra_load=extra, extra_bytes=claimed)
            except InsufficientCapacity:
                plan.unplaced.append(mid)
                continue
            extra[target] = extra.get(target, 0.0) + shares[mid]
            claimed[target] = claimed.get(target, 0) + entry.manifest.declared_footprint_bytes
            plan.moves.append((mid, worker_id, target))
        return plan

    def apply_migration(self, plan: MigrationPlan) -> list[Action]:
        """Load on target now; the evict on the source is released by the target's ack."""
        actions = []
        for mid, src, dst in plan.moves:
            entry = self.registry[mid]
            entry.state = "migrating"
            entry.loading.append(dst)
            self._after_ack.setdefault((mid, dst), []).append(Action("evict", src, mid))
            actions.append(Action("load", dst, mid))
        return actions

    def saturated_workers(self) -> list[str]:
        out = []
        for w in self.live_workers():
            models = [m for m in w.resident if m in self.registry]
            if len(models) > 1 and any(self.worker_capacity_share(w.worker_id, m) >= self.saturation_threshold
                                       for m in models):
                out.append(w.worker_id)
        return out

    # ------------------------------------------------------------------ failure

    def _mark_failed(self, worker_id: str) -> None:
        w = self.workers[worker_id]
        w.failed = True
        for mid in list(w.resident):
            self._drop_replica(mid, worker_id)
        for entry in self.registry.values():
            if worker_id in entry.loading:
                entry.loading.remove(worker_id)
        for key in [k for k in self._after_ack if k[1] == worker_id]:
            del self._after_ack[key]
        w.resident.clear()

    def handle_worker_failure(self, worker_id: str, now: float = 0.0) -> list[Action]:
        """Drop the worker from every replica set and re-place to restore target counts."""
        if self.workers[worker_id].failed:
            return []
        affected = sorted(mid for mid, e in self.registry.items()
                          if worker_id in e.replicas or worker_id in e.loading)
        self._mark_failed(worker_id)
        self._log(op="worker_failed", worker_id=worker_id, t=now)
        self._bump()
        actions = []
        for mid in affected:
            entry = self.registry[mid]
            want = max(entry.target, entry.min_replicas)
            missing = want - len(entry.replicas) - len(entry.loading)
            if missing <= 0:
                continue
            try:
                picks = self.place(entry.manifest, missing, exclude=entry.replicas + entry.loading)
            except InsufficientCapacity as exc:
                picks = exc.partial
            for wid in picks:
                entry.loading.append(wid)
                actions.append(Action("load", wid, mid))
        return actions

    # ------------------------------------------------------------------ routing

    def route(self, model_id: str, views: Mapping[str, WorkerView]) -> list[str]:
        """Replica order for a request; the caller tries the first and, on rejection, the second."""
        entry = self.registry.get(model_id)
        if entry is None or entry.state == "deleted":
            raise ModelUnavailable(model_id)
        replicas = self.routing.replicas(model_id)
        if not replicas:
            raise ModelUnavailable(f"{model_id}: no routable replica")
        return order_replicas(replicas, views)

    def check_routing_coherence(self) -> None:
        for mid, replicas in self.routing.routes.items():
            for wid in replicas:
                assert mid in self.workers[wid].resident, f"route to {wid} for {mid} without ack"

    def describe(self) -> dict:
        return {
            "routing_version": self.routing.version,
            "models": {
                mid: {"tenant": e.tenant_id, "state": e.state, "input": str(e.manifest.input_shape), "replicas": list(e.replicas),
                      "loading": list(e.loading), "demand": e.demand_ewma, "target": e.target}
                for mid, e in sorted(self.registry.items())
            },
            "workers": {
                wid: {"device": w.device.device_id, "failed": w.failed, "load": w.load_ewma,
                      "resident": sorted(w.resident), "last_heartbeat": w.last_heartbeat}
                for wid, w in sorted(self.workers.items())
            },
        }


def transfer_view(manifest: ModelManifest, device: DeviceProfile) -> float:
    return predict_transfer(manifest, device, "host-hit")[1]
