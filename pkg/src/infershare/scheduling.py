"""Per-resource queues and the selection policies interposed before each resource."""
from __future__ import annotations

import heapq
import math
from dataclasses import replace
from typing import Iterable, Mapping

from .lifecycle import PendingItem, WorkerQueueSnapshot

POLICIES = ("fifo", "edf", "srpt", "min-avg-latency")


def policy_key(policy: str, item: PendingItem) -> tuple:
    """Total order used by ``policy``; ties fall back to (arrival_time, request_id)."""
    if policy == "fifo":
        return (item.arrival_time, item.request_id)
    if policy == "edf":
        return (item.deadline, item.arrival_time, item.request_id)
    if policy in ("srpt", "min-avg-latency"):
        # on a serial resource with known costs, shortest-first minimises mean completion
        return (item.work_ms, item.arrival_time, item.request_id)
    raise ValueError(f"unknown policy {policy!r}")


def order_items(policy: str, items: Iterable[PendingItem]) -> list[PendingItem]:
    return sorted(items, key=lambda it: policy_key(policy, it))


def round_robin_order(
    policy: str, items: Iterable[PendingItem], weights: Mapping[str, int] | None = None,
    tenant_order: list[str] | None = None,
) -> list[PendingItem]:
    """Service order under weighted round-robin across tenants, ``policy`` within a tenant."""
    per_tenant: dict[str, list[PendingItem]] = {}
    for it in order_items(policy, items):
        per_tenant.setdefault(it.tenant_id, []).append(it)
    tenants = list(tenant_order or [])
    tenants += sorted(t for t in per_tenant if t not in tenants)
    out: list[PendingItem] = []
    cursors = {t: 0 for t in per_tenant}
    while len(out) < sum(len(v) for v in per_tenant.values()):
        for t in tenants:
            queue = per_tenant.get(t)
            if not queue:
                continue
            w = (weights or {}).get(t, 1)
            take = queue[cursors[t]:cursors[t] + w]
            cursors[t] += len(take)
            out.extend(take)
    return out


class ResourceQueue:
    """Pending work for one serial resource (transfer or execute).

    Plain FIFO is strict admission order: if the head is not ready yet, the
    resource idles rather than letting later requests overtake. Every other
    configuration is work-conserving over ready items.
    """

    def __init__(self, resource: str, policy: str = "fifo", fair: bool = False,
                 weights: Mapping[str, int] | None = None):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.resource = resource
        self.policy = policy
        self.fair = fair
        self.weights = dict(weights or {})
        self.busy_until = 0.0
        self.current: tuple[str, ...] = ()
        self._items: dict[str, PendingItem] = {}
        self._heaps: dict[str | None, list] = {}
        self._tenant_order: list[str] = []
        self._rr_pos = 0
        self._rr_credit = 0

    @property
    def strict(self) -> bool:
        return self.policy == "fifo" and not self.fair

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, request_id: str) -> bool:
        return request_id in self._items

    def items(self) -> list[PendingItem]:
        return list(self._items.values())

    def get(self, request_id: str) -> PendingItem:
        return self._items[request_id]

    def _push(self, item: PendingItem) -> None:
        bucket = item.tenant_id if self.fair else None
        if self.fair and item.tenant_id not in self._tenant_order:
            self._tenant_order.append(item.tenant_id)
        heapq.heappush(self._heaps.setdefault(bucket, []), (policy_key(self.policy, item), item.request_id))

    def add(self, item: PendingItem) -> None:
        self._items[item.request_id] = item
        if self.strict or item.ready_at is not None:
            self._push(item)

    def mark_ready(self, request_id: str, at: float) -> None:
        item = replace(self._items[request_id], ready_at=at)
        self._items[request_id] = item
        if not self.strict:
            self._push(item)

    def remove(self, request_id: str) -> PendingItem | None:
        return self._items.pop(request_id, None)

    def _peek(self, bucket, now: float) -> PendingItem | None:
        heap = self._heaps.get(bucket)
        while heap:
            _, rid = heap[0]
            item = self._items.get(rid)
            if item is None or (not self.strict and item.ready_at is None):
                heapq.heappop(heap)
                continue
            if item.ready_at is None or item.ready_at > now:
                return None
            return item
        return None

    def select(self, now: float) -> PendingItem | None:
        """Policy choice among pending items, without removing it."""
        if not self.fair:
            return self._peek(None, now)
        n = len(self._tenant_order)
        for step in range(n):
            idx = (self._rr_pos + step) % n
            item = self._peek(self._tenant_order[idx], now)
            if item is not None:
                return item
        return None

    def take(self, now: float) -> PendingItem | None:
        """Select the next item and remove it; advances the round-robin turn."""
        item = self.select(now)
        if item is None:
            return None
        if self.fair:
            idx = self._tenant_order.index(item.tenant_id)
            if idx != self._rr_pos or self._rr_credit <= 0:
                self._rr_credit = self.weights.get(item.tenant_id, 1)
            self._rr_credit -= 1
            n = len(self._tenant_order)
            self._rr_pos = (idx + 1) % n if self._rr_credit <= 0 else idx
        del self._items[item.request_id]
        return item

    def take_same_model(self, model_id: str, now: float, limit: int) -> list[PendingItem]:
        """Ready items for ``model_id`` in policy order (batch coalescing)."""
        if limit <= 0:
            return []
        ready = [it for it in self._items.values()
                 if it.model_id == model_id and it.ready_at is not None and it.ready_at <= now]
        chosen = order_items(self.policy, ready)[:limit]
        for it in chosen:
            del self._items[it.request_id]
        return chosen

    def service_order(self) -> list[PendingItem]:
        """Predicted order of all pending items assuming no further arrivals."""
        if self.fair:
            rotated = self._tenant_order[self._rr_pos:] + self._tenant_order[:self._rr_pos]
            return round_robin_order(self.policy, self._items.values(), self.weights, rotated)
        return order_items(self.policy, self._items.values())


def schedule_next(queue: ResourceQueue, snapshot: WorkerQueueSnapshot) -> str | None:
    """Request id the free resource should start next, or None to idle."""
    item = queue.take(snapshot.timestamp)
    return None if item is None else item.request_id


def mean_completion(work: Iterable[float], start: float = 0.0) -> float:
    """Mean completion time of jobs run back to back in the given order."""
    t = start
    total = 0.0
    n = 0
    for w in work:
        t += w
        total += t
        n += 1
    return total / n if n else math.nan
