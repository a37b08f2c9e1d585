"""Worker core: many tenants' models, one device, two serial resources.

The worker never reads a clock or sleeps. Callers pass ``now`` (virtual or
wall-clock milliseconds), start the stages returned by :meth:`Worker.dispatch`,
and report each finished stage through :meth:`Worker.complete`. The
simulator and the network server drive the same object this way.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .cache import CacheEntry, CacheFull, CacheHierarchy, ResidencyPlan
from .errors import ModelTooLarge, UnknownModel
from .lifecycle import (
    TERMINAL,
    InferenceRequest,
    PendingItem,
    RequestState,
    Residency,
    WorkerQueueSnapshot,
)
from .manifest import ModelManifest
from .predictor import (
    CalibrationState,
    DeviceProfile,
    LatencyEstimate,
    analytic_exec_ms,
    estimate_completion,
    predict_exec,
    predict_transfer,
    update_calibration,
)
from .scheduling import ResourceQueue

log = logging.getLogger(__name__)

DEFAULT_ADMISSION_CEILING_MS = 1000.0
TRANSFER = "transfer"
EXECUTE = "execute"


@dataclass
class Admission:
    admitted: bool
    estimate: LatencyEstimate
    reason: str | None = None


@dataclass
class Stage:
    """One occupancy of a resource; the driver runs it and reports completion."""

    stage_id: int
    resource: str
    model_id: str
    request_ids: tuple[str, ...]
    start: float
    predicted_ms: float
    analytic_ms: float
    fetch_ms: float = 0.0
    transfer_ms: float = 0.0
    batch: int = 1


@dataclass
class CompletionRecord:
    request_id: str
    tenant_id: str
    model_id: str
    worker_id: str
    device_id: str
    arrival_time: float
    finish_time: float
    fetch_ms: float
    transfer_ms: float
    exec_ms: float
    device_ms: float          # device occupancy attributed to this request (batch share)
    residency: str
    batch_size: int
    estimate_ms: float
    deadline_ms: float | None
    cost_per_hour: float
    exec_start: float
    output: object = None

    @property
    def latency_ms(self) -> float:
        return self.finish_time - self.arrival_time

    @property
    def queue_ms(self) -> float:
        return self.latency_ms - self.fetch_ms - self.transfer_ms - self.exec_ms


@dataclass
class RerouteDecision:
    request_id: str
    action: str                 # "keep" | "cancel-and-reroute"
    estimate: LatencyEstimate


@dataclass
class _TransferJob:
    owner: str
    model_id: str
    fetch_ms: float
    transfer_ms: float
    force: bool = False
    waiters: list[str] = field(default_factory=list)
    started: bool = False
    predicted_ready: float = math.nan
    host_pinned: bool = False

    @property
    def duration(self) -> float:
        return self.fetch_ms + self.transfer_ms


@dataclass
class _Tracked:
    request: InferenceRequest
    estimate: LatencyEstimate
    residency: Residency
    exec_ms: float
    job: _TransferJob | None
    work_ms: float
    admitted_at: float
    fetch_ms: float = 0.0
    transfer_ms: float = 0.0
    exec_start: float = math.nan


class Worker:
    def __init__(
        self,
        worker_id: str,
        device: DeviceProfile,
        host_cache_bytes: int,
        *,
        policy: str = "fifo",
        fair: bool = False,
        batching: bool = False,
        admission_ceiling_ms: float = DEFAULT_ADMISSION_CEILING_MS,
        tenant_ceiling_ms: float | Mapping[str, float] | None = None,
        tenant_weights: Mapping[str, int] | None = None,
        executor: str = "virtual",
    ):
        self.worker_id = worker_id
        self.device = device
        self.policy = policy
        self.fair = fair
        self.batching = batching
        self.admission_ceiling_ms = admission_ceiling_ms
        self.tenant_ceiling_ms = tenant_ceiling_ms
        self.executor = executor
        self.cache = CacheHierarchy(device.device_memory_bytes, host_cache_bytes)
        self.calibration = CalibrationState()
        self.models: dict[str, ModelManifest] = {}
        self.weights: dict[str, object] = {}
        self.queues = {
            TRANSFER: ResourceQueue(TRANSFER, policy, fair, tenant_weights),
            EXECUTE: ResourceQueue(EXECUTE, policy, fair, tenant_weights),
        }
        self.available_at = 0.0
        self.failed = False
        self.warnings: list[str] = []
        self._tracked: dict[str, _Tracked] = {}
        self._jobs: dict[str, _TransferJob] = {}          # owner request id -> job
        self._inflight: dict[str, _TransferJob] = {}      # model id -> non-forced job filling the device
        self._running: dict[str, Stage] = {}               # resource -> stage
        self._stage_seq = 0
        self._evicting: set[str] = set()
        self._tenant_work: dict[str, float] = {}
        self._pending_work = {TRANSFER: 0.0, EXECUTE: 0.0}
        self._tails_valid = True
        self._xfer_tail = 0.0
        self._exec_tail = 0.0
        self.completed = 0

    # ------------------------------------------------------------------ models

    def load_model(self, model_id: str, manifest: ModelManifest, now: float = 0.0) -> None:
        """Register a model and make it host resident (weights generated in reference mode)."""
        if model_id in self.models and model_id not in self._evicting:
            return
        self._evicting.discard(model_id)
        nbytes = manifest.declared_footprint_bytes
        if nbytes > self.cache.host.capacity:
            raise ModelTooLarge(f"{model_id}: {nbytes} bytes exceed host cache {self.cache.host.capacity}")
        self.models[model_id] = manifest
        if model_id not in self.cache.host:
            plan = ResidencyPlan()
            for v in self.cache.host.victims_for(nbytes):
                plan.evictions.append(("host", v.model_id))
            for level, victim in plan.evictions:
                self.cache.level(level).remove(victim)
            self.cache.host.insert(CacheEntry(model_id, "host", nbytes, now, last_used_seq=self.cache.seq))
        if self.executor == "reference" and model_id not in self.weights:
            from .executor import generate_weights
            self.weights[model_id] = generate_weights(manifest)

    def evict_model(self, model_id: str, now: float = 0.0) -> bool:
        """Unregister once nothing uses the model. Returns True when removal happened now."""
        if model_id not in self.models:
            raise UnknownModel(model_id)
        self._evicting.add(model_id)
        return self._finish_eviction(model_id)

    def _finish_eviction(self, model_id: str) -> bool:
        busy = any(t.request.model_id == model_id for t in self._tracked.values())
        if busy:
            return False
        for level in (self.cache.device, self.cache.host):
            if model_id in level:
                level.remove(model_id)
        self.models.pop(model_id, None)
        self.weights.pop(model_id, None)
        self._evicting.discard(model_id)
        return True

    def registered(self, model_id: str) -> bool:
        return model_id in self.models and model_id not in self._evicting

    def residency(self, model_id: str) -> Residency:
        entry = self.cache.device.get(model_id)
        if entry is not None:
            return Residency.INFLIGHT if entry.loading else Residency.DEVICE
        host = self.cache.host.get(model_id)
        if host is not None and not host.loading:
            return Residency.HOST
        return Residency.COLD

    # --------------------------------------------------------------- residency

    def ensure_resident(self, model_id: str, target_level: str) -> ResidencyPlan:
        if model_id not in self.models:
            raise UnknownModel(model_id)
        nbytes = self.models[model_id].declared_footprint_bytes
        plan = self.cache.plan(model_id, nbytes, target_level)
        return plan

    # ---------------------------------------------------------------- snapshot

    def _busy_until(self, resource: str, now: float) -> float:
        stage = self._running.get(resource)
        t = stage.start + stage.predicted_ms if stage is not None else now
        return max(t, now, self.available_at)

    def _recompute_tails(self, now: float) -> None:
        t = self._busy_until(TRANSFER, now)
        running = self._running.get(TRANSFER)
        if running is not None:
            job = self._jobs.get(running.request_ids[0])
            if job is not None:
                job.predicted_ready = running.start + running.predicted_ms
        for item in self.queues[TRANSFER].service_order():
            job = self._jobs[item.request_id]
            t += job.duration
            job.predicted_ready = t
        self._xfer_tail = t
        e = self._busy_until(EXECUTE, now)
        for item in self.queues[EXECUTE].service_order():
            e = max(self._ready_time(item), e) + item.work_ms
        self._exec_tail = e
        self._tails_valid = True

    def _ready_time(self, item: PendingItem) -> float:
        if item.ready_at is not None:
            return item.ready_at
        return self._tracked[item.request_id].job.predicted_ready

    def snapshot(self, now: float) -> WorkerQueueSnapshot:
        strict = self.policy == "fifo" and not self.fair
        if strict:
            if not self._tails_valid:
                self._recompute_tails(now)
            xfree = max(self._xfer_tail, self._busy_until(TRANSFER, now))
            efree = max(self._exec_tail, self._busy_until(EXECUTE, now))
            xitems = eitems = ()
        else:
            self._recompute_tails(now)  # fills job.predicted_ready in policy order
            xfree = self._busy_until(TRANSFER, now) + self._pending_work[TRANSFER]
            efree = self._busy_until(EXECUTE, now) + self._pending_work[EXECUTE]
            xitems = tuple(self.queues[TRANSFER].items())
            eitems = tuple(self.queues[EXECUTE].items())
        inflight = {m: job.predicted_ready for m, job in self._inflight.items()}
        residency = {m: self.residency(m) for m in self.models}
        return WorkerQueueSnapshot(
            timestamp=now,
            policy=self.policy,
            fair=self.fair,
            device=self.device,
            models={m: mf for m, mf in self.models.items() if m not in self._evicting},
            residency=residency,
            inflight_ready=inflight,
            transfer_busy_until=self._busy_until(TRANSFER, now),
            execute_busy_until=self._busy_until(EXECUTE, now),
            transfer_free_at=xfree,
            execute_free_at=efree,
            transfer_pending=xitems,
            execute_pending=eitems,
        )

    def pending_work_ms(self, now: float) -> float:
        snap = self.snapshot(now)
        return max(snap.transfer_pending_ms, snap.execute_pending_ms)

    def tenant_pending_ms(self, tenant_id: str) -> float:
        return self._tenant_work.get(tenant_id, 0.0)

    # --------------------------------------------------------------- admission

    def _tenant_ceiling(self, tenant_id: str) -> float | None:
        c = self.tenant_ceiling_ms
        if isinstance(c, Mapping):
            return c.get(tenant_id, c.get("*"))
        return c

    def _reject(self, request: InferenceRequest, estimate: LatencyEstimate, reason: str) -> Admission:
        request.transition(RequestState.REJECTED)
        return Admission(False, estimate, reason)

    def admit(self, request: InferenceRequest, now: float) -> Admission:
        if self.failed:
            raise UnknownModel(f"worker {self.worker_id} has failed")
        if not self.registered(request.model_id):
            raise UnknownModel(request.model_id)
        manifest = self.models[request.model_id]
        snap = self.snapshot(now)
        est = estimate_completion(request, snap, self.calibration)
        if manifest.declared_footprint_bytes > self.device.device_memory_bytes:
            return self._reject(request, est, "ModelTooLarge")
        if request.batch > self.device.max_batch:
            return self._reject(request, est, "BatchTooLarge")

        residency = snap.residency.get(request.model_id, Residency.COLD)
        forced = request.force_transfer and residency == Residency.DEVICE
        own_job = forced or residency in (Residency.HOST, Residency.COLD)
        ceiling = self.admission_ceiling_ms
        # a boot hold delays work but is not queued work
        hold = max(0.0, self.available_at - now)
        if (own_job and snap.transfer_pending_ms - hold > ceiling) or snap.execute_pending_ms - hold > ceiling:
            return self._reject(request, est, "Overloaded")
        work = est.fetch_ms + est.transfer_ms + est.exec_ms
        tenant_ceiling = self._tenant_ceiling(request.tenant_id)
        if tenant_ceiling is not None and self.tenant_pending_ms(request.tenant_id) + work > tenant_ceiling:
            return self._reject(request, est, "TenantOverloaded")
        if request.deadline_ms is not None and est.total_ms > request.deadline_ms:
            return self._reject(request, est, "WouldMissDeadline")

        plan = None
        if own_job and not forced:
            try:
                plan = self.ensure_resident(request.model_id, "device")
            except CacheFull:
                return self._reject(request, est, "CacheFull")
            except ModelTooLarge:
                return self._reject(request, est, "ModelTooLarge")

        # commit
        self.cache.seq += 1
        mid = request.model_id
        rid = request.request_id
        if plan is not None:
            self.warnings.extend(plan.warnings)
            self.cache.apply(plan, now)
        job = None
        if own_job:
            job = _TransferJob(rid, mid, est.fetch_ms, est.transfer_ms, force=forced)
            if not forced:
                self._inflight[mid] = job
            host = self.cache.host.get(mid)
            if host is not None and not host.loading:
                host.pinned_count += 1
                job.host_pinned = True
            self._jobs[rid] = job
        elif residency == Residency.INFLIGHT:
            job = self._inflight[mid]
            job.waiters.append(rid)
        dev = self.cache.device.get(mid)
        dev.pinned_count += 1
        self.cache.device.touch(mid, now, self.cache.seq)
        self.cache.host.touch(mid, now, self.cache.seq)

        tracked = _Tracked(request, est, Residency.HOST if forced else residency, est.exec_ms, job, work, now)
        self._tracked[rid] = tracked
        self._tenant_work[request.tenant_id] = self._tenant_work.get(request.tenant_id, 0.0) + work
        if own_job:
            request.transition(RequestState.QUEUED_TRANSFER)
            self.queues[TRANSFER].add(PendingItem(rid, request.tenant_id, mid, request.arrival_time,
                                                  request.absolute_deadline, job.duration, now))
            self._pending_work[TRANSFER] += job.duration
        else:
            request.transition(RequestState.QUEUED_EXECUTE)
        ready = now if job is None else None
        self.queues[EXECUTE].add(PendingItem(rid, request.tenant_id, mid, request.arrival_time,
                                             request.absolute_deadline, est.exec_ms, ready))
        self._pending_work[EXECUTE] += est.exec_ms

        if self._tails_valid and self.policy == "fifo" and not self.fair:
            if own_job:
                start = max(now, self._xfer_tail, self._busy_until(TRANSFER, now))
                job.predicted_ready = start + job.duration
                self._xfer_tail = job.predicted_ready
            ready_pred = now if job is None else job.predicted_ready
            self._exec_tail = max(ready_pred, self._exec_tail, self._busy_until(EXECUTE, now)) + est.exec_ms
        else:
            self._tails_valid = False
        return Admission(True, est)

    # ---------------------------------------------------------------- dispatch

    def dispatch(self, now: float) -> list[Stage]:
        """Start work on every idle resource; returns the stages the driver must run."""
        if self.failed or now < self.available_at:
            return []
        stages = []
        if TRANSFER not in self._running:
            item = self.queues[TRANSFER].take(now)
            if item is not None:
                self._pending_work[TRANSFER] -= item.work_ms
                job = self._jobs[item.request_id]
                job.started = True
                self._tracked[item.request_id].request.transition(RequestState.TRANSFERRING)
                stages.append(self._start(TRANSFER, job.model_id, (item.request_id,), now,
                                          job.duration, job.duration, fetch=job.fetch_ms, transfer=job.transfer_ms))
        if EXECUTE not in self._running:
            item = self.queues[EXECUTE].take(now)
            if item is not None:
                items = [item]
                if self.batching:
                    room = self.device.max_batch - self._tracked[item.request_id].request.batch
                    for extra in self.queues[EXECUTE].take_same_model(item.model_id, now, room):
                        if room - self._tracked[extra.request_id].request.batch < 0:
                            self.queues[EXECUTE].add(extra)
                            continue
                        room -= self._tracked[extra.request_id].request.batch
                        items.append(extra)
                self._pending_work[EXECUTE] -= sum(it.work_ms for it in items)
                batch = sum(self._tracked[it.request_id].request.batch for it in items)
                manifest = self.models[item.model_id]
                if len(items) == 1:
                    predicted = item.work_ms
                else:
                    predicted = predict_exec(manifest, self.device, batch, self.calibration, item.model_id)
                    self._tails_valid = False
                analytic = analytic_exec_ms(manifest, self.device, batch)
                for it in items:
                    tr = self._tracked[it.request_id]
                    tr.request.transition(RequestState.EXECUTING)
                    tr.exec_start = now
                stages.append(self._start(EXECUTE, item.model_id, tuple(it.request_id for it in items),
                                          now, predicted, analytic, batch=batch))
        return stages

    def _start(self, resource, model_id, rids, now, predicted, analytic, fetch=0.0, transfer=0.0, batch=1) -> Stage:
        self._stage_seq += 1
        stage = Stage(self._stage_seq, resource, model_id, rids, now, predicted, analytic, fetch, transfer, batch)
        self._running[resource] = stage
        return stage

    # -------------------------------------------------------------- completion

    def complete(self, stage: Stage, now: float, realized_ms: float | None = None,
                 outputs: Mapping[str, object] | None = None) -> list[CompletionRecord]:
        if self._running.get(stage.resource) is not stage:
            raise ValueError(f"stage {stage.stage_id} is not running on {self.worker_id}")
        del self._running[stage.resource]
        realized = now - stage.start if realized_ms is None else realized_ms
        if realized != stage.predicted_ms:
            self._tails_valid = False
        if stage.resource == TRANSFER:
            self._finish_transfer(stage, now, realized)
            return []
        return self._finish_execute(stage, now, realized, outputs or {})

    def _finish_transfer(self, stage: Stage, now: float, realized: float) -> None:
        rid = stage.request_ids[0]
        job = self._jobs.pop(rid)
        owner = self._tracked[rid]
        owner.fetch_ms = job.fetch_ms
        owner.transfer_ms = realized - job.fetch_ms
        if job.host_pinned:
            self.cache.host.get(job.model_id).pinned_count -= 1
        if not job.force:
            if self._inflight.get(job.model_id) is job:
                del self._inflight[job.model_id]
            for level in (self.cache.host, self.cache.device):
                entry = level.get(job.model_id)
                if entry is not None:
                    entry.loading = False
                    entry.last_used_time = now
        owner.request.transition(RequestState.QUEUED_EXECUTE)
        for r in [rid, *job.waiters]:
            if r in self.queues[EXECUTE]:
                self.queues[EXECUTE].mark_ready(r, now)

    def _finish_execute(self, stage: Stage, now: float, realized: float, outputs) -> list[CompletionRecord]:
        update_calibration(self.calibration, (stage.model_id, self.device.device_id, stage.batch), realized)
        share = realized / len(stage.request_ids)
        records = []
        entry = self.cache.device.get(stage.model_id)
        for rid in stage.request_ids:
            tr = self._tracked.pop(rid)
            req = tr.request
            req.transition(RequestState.DONE)
            entry.pinned_count -= 1
            self._release_tenant_work(tr)
            records.append(CompletionRecord(
                request_id=rid,
                tenant_id=req.tenant_id,
                model_id=req.model_id,
                worker_id=self.worker_id,
                device_id=self.device.device_id,
                arrival_time=req.arrival_time,
                finish_time=now,
                fetch_ms=tr.fetch_ms,
                transfer_ms=tr.transfer_ms,
                exec_ms=realized,
                device_ms=share,
                residency=tr.residency.value,
                batch_size=stage.batch,
                estimate_ms=tr.estimate.total_ms,
                deadline_ms=req.deadline_ms,
                cost_per_hour=self.device.cost_per_hour,
                exec_start=tr.exec_start,
                output=outputs.get(rid),
            ))
        self.cache.device.touch(stage.model_id, now, self.cache.seq)
        self.completed += len(records)
        if stage.model_id in self._evicting:
            self._finish_eviction(stage.model_id)
        return records

    def _release_tenant_work(self, tr: _Tracked) -> None:
        t = tr.request.tenant_id
        left = self._tenant_work.get(t, 0.0) - tr.work_ms
        if left <= 1e-9:
            self._tenant_work.pop(t, None)
        else:
            self._tenant_work[t] = left

    # ------------------------------------------------------------ cancellation

    def cancel(self, request_id: str, now: float, state: RequestState = RequestState.CANCELLED) -> bool:
        """Withdraw a queued request. Requests occupying a resource are never cancelled."""
        tr = self._tracked.get(request_id)
        if tr is None or tr.request.state not in (RequestState.QUEUED_TRANSFER, RequestState.QUEUED_EXECUTE):
            return False
        job = tr.job
        mid = tr.request.model_id
        if job is not None and job.owner == request_id and not job.started:
            self.queues[TRANSFER].remove(request_id)
            self._pending_work[TRANSFER] -= job.duration
            del self._jobs[request_id]
            if job.waiters:
                heir = job.waiters.pop(0)
                job.owner = heir
                self._jobs[heir] = job
                htr = self._tracked[heir].request
                self.queues[TRANSFER].add(PendingItem(heir, htr.tenant_id, mid, htr.arrival_time,
                                                      htr.absolute_deadline, job.duration, now))
                self._pending_work[TRANSFER] += job.duration
                htr.state = RequestState.QUEUED_TRANSFER
            else:
                if job.host_pinned:
                    self.cache.host.get(mid).pinned_count -= 1
                if not job.force:
                    self._inflight.pop(mid, None)
                    dev = self.cache.device.get(mid)
                    dev.pinned_count -= 1
                    if dev.loading and dev.pinned_count == 0:
                        self.cache.device.remove(mid)
                    host = self.cache.host.get(mid)
                    if host is not None and host.loading and host.pinned_count == 0:
                        self.cache.host.remove(mid)
                    dev = None
                else:
                    self.cache.device.get(mid).pinned_count -= 1
                dev = None
                tr.job = None
                job = None
                self._finish_cancel(tr, request_id, state)
                return True
        elif job is not None and request_id in job.waiters:
            job.waiters.remove(request_id)
        self.cache.device.get(mid).pinned_count -= 1
        self._finish_cancel(tr, request_id, state)
        return True

    def _finish_cancel(self, tr: _Tracked, request_id: str, state: RequestState) -> None:
        item = self.queues[EXECUTE].remove(request_id)
        if item is not None:
            self._pending_work[EXECUTE] -= item.work_ms
        del self._tracked[request_id]
        self._release_tenant_work(tr)
        tr.request.transition(state)
        self._tails_valid = False
        if tr.request.model_id in self._evicting:
            self._finish_eviction(tr.request.model_id)

    # ----------------------------------------------------------------- reroute

    def project_finish_times(self, now: float) -> dict[str, float]:
        """Predicted finish of every queued request if nothing else arrives."""
        finish: dict[str, float] = {}
        ready: dict[str, float] = {}
        t = self._busy_until(TRANSFER, now)
        running = self._running.get(TRANSFER)
        if running is not None:
            job = self._jobs.get(running.request_ids[0])
            if job is not None:
                for r in [job.owner, *job.waiters]:
                    ready[r] = running.start + running.predicted_ms
        for item in self.queues[TRANSFER].service_order():
            job = self._jobs[item.request_id]
            t += job.duration
            for r in [job.owner, *job.waiters]:
                ready[r] = t
        q = copy.deepcopy(self.queues[EXECUTE])
        waiting = sorted((ready[it.request_id], it.request_id) for it in q.items() if it.ready_at is None)
        e = self._busy_until(EXECUTE, now)
        i = 0
        while len(q):
            while i < len(waiting) and waiting[i][0] <= e:
                q.mark_ready(waiting[i][1], waiting[i][0])
                i += 1
            item = q.take(e)
            if item is None:
                if i >= len(waiting):
                    break
                e = max(e, waiting[i][0])
                continue
            e = max(e, item.ready_at) + item.work_ms
            finish[item.request_id] = e
        return finish

    def reroute_check(self, now: float) -> list[RerouteDecision]:
        finish = self.project_finish_times(now)
        out = []
        for rid, tr in sorted(self._tracked.items()):
            req = tr.request
            if req.state not in (RequestState.QUEUED_TRANSFER, RequestState.QUEUED_EXECUTE):
                continue
            if req.deadline_ms is None:
                continue
            done_at = finish.get(rid, now + tr.work_ms)
            est = LatencyEstimate(0.0, 0.0, tr.exec_ms, max(0.0, done_at - now - tr.exec_ms))
            action = "cancel-and-reroute" if done_at > req.absolute_deadline + 1e-9 else "keep"
            out.append(RerouteDecision(rid, action, est))
        return out

    # ----------------------------------------------------------------- failure

    def fail(self, now: float) -> list[InferenceRequest]:
        """Crash: every unfinished request is lost and returned for the router to retry."""
        self.failed = True
        lost = []
        for tr in self._tracked.values():
            if tr.request.state not in TERMINAL:
                tr.request.state = RequestState.FAILED
                lost.append(tr.request)
        self._tracked.clear()
        self._running.clear()
        return lost

    def hold_until(self, t: float) -> None:
        """No stage may start before ``t`` (used to model machine boot)."""
        self.available_at = max(self.available_at, t)
        self._tails_valid = False

    # ------------------------------------------------------------------- stats

    def active_requests(self) -> Iterable[InferenceRequest]:
        return (t.request for t in self._tracked.values())

    def stats(self, now: float) -> dict:
        snap = self.snapshot(now)
        doc = snap.to_document()
        doc.update({
            "worker_id": self.worker_id,
            "completed": self.completed,
            "active": len(self._tracked),
            "cache": {"device": self.cache.device.occupancy(), "host": self.cache.host.occupancy()},
            "models": sorted(self.models),
        })
        return doc

    def check_invariants(self) -> None:
        self.cache.check()
        pins = {}
        for tr in self._tracked.values():
            pins[tr.request.model_id] = pins.get(tr.request.model_id, 0) + 1
        for mid, entry in self.cache.device.entries.items():
            assert entry.pinned_count == pins.get(mid, 0), f"pin count drift on {mid}"
