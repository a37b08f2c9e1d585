"""Request lifecycle and the queue snapshot shared by worker and predictor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .errors import InferShareError


class Residency(str, Enum):
    DEVICE = "device-hit"
    HOST = "host-hit"
    COLD = "cold"
    # weights are being copied by another request's transfer job
    INFLIGHT = "inflight"


class RequestState(str, Enum):
    QUEUED_TRANSFER = "queued-transfer"
    QUEUED_EXECUTE = "queued-execute"
    TRANSFERRING = "transferring"
    EXECUTING = "executing"
    DONE = "done"
    REJECTED = "rejected"
    CANCELLED = "cancelled"
    REROUTED = "rerouted"
    FAILED = "failed"


TERMINAL = frozenset({RequestState.DONE, RequestState.REJECTED, RequestState.CANCELLED,
                      RequestState.REROUTED, RequestState.FAILED})

_S = RequestState
_TRANSITIONS = {
    None: {_S.QUEUED_TRANSFER, _S.QUEUED_EXECUTE, _S.REJECTED},
    _S.QUEUED_TRANSFER: {_S.TRANSFERRING, _S.QUEUED_EXECUTE, _S.CANCELLED, _S.REROUTED, _S.FAILED},
    _S.TRANSFERRING: {_S.QUEUED_EXECUTE, _S.FAILED},
    _S.QUEUED_EXECUTE: {_S.EXECUTING, _S.CANCELLED, _S.REROUTED, _S.FAILED},
    # executing work is never pre-empted
    _S.EXECUTING: {_S.DONE, _S.FAILED},
}


class IllegalTransition(InferShareError):
    pass


@dataclass
class InferenceRequest:
    request_id: str
    tenant_id: str
    model_id: str
    batch: int = 1
    arrival_time: float = 0.0
    deadline_ms: float | None = None
    input: Any = None
    # forces a host->device copy even when the model is device resident (hit-ratio sweeps)
    force_transfer: bool = False
    state: RequestState | None = None

    @property
    def absolute_deadline(self) -> float:
        return math.inf if self.deadline_ms is None else self.arrival_time + self.deadline_ms

    def transition(self, new: RequestState) -> None:
        allowed = _TRANSITIONS.get(self.state, set())
        if new not in allowed:
            raise IllegalTransition(f"{self.request_id}: {self.state} -> {new}")
        self.state = new


@dataclass(frozen=True)
class PendingItem:
    """One unit of queued work on a resource, as seen by schedulers and estimators."""

    request_id: str
    tenant_id: str
    model_id: str
    arrival_time: float
    deadline: float          # absolute, inf when none
    work_ms: float           # predicted occupancy of this resource
    ready_at: float | None   # None: waiting on an upstream stage


@dataclass(frozen=True)
class WorkerQueueSnapshot:
    timestamp: float
    policy: str
    fair: bool
    device: Any                                   # predictor.DeviceProfile
    models: Mapping[str, Any]                     # model_id -> ModelManifest
    residency: Mapping[str, Residency]
    inflight_ready: Mapping[str, float] = field(default_factory=dict)
    transfer_busy_until: float = 0.0
    execute_busy_until: float = 0.0
    transfer_free_at: float = 0.0                 # after all admitted transfer work (FIFO order)
    execute_free_at: float = 0.0
    transfer_pending: tuple[PendingItem, ...] = ()
    execute_pending: tuple[PendingItem, ...] = ()

    @property
    def transfer_pending_ms(self) -> float:
        return max(0.0, self.transfer_free_at - self.timestamp)

    @property
    def execute_pending_ms(self) -> float:
        return max(0.0, self.execute_free_at - self.timestamp)

    def to_document(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "policy": self.policy,
            "fair": self.fair,
            "device_id": self.device.device_id,
            "transfer_pending_ms": self.transfer_pending_ms,
            "execute_pending_ms": self.execute_pending_ms,
            "residency": {k: v.value for k, v in sorted(self.residency.items())},
            "queued_transfer": len(self.transfer_pending),
            "queued_execute": len(self.execute_pending),
        }
