"""Two-level (host, device) model residency cache with pinning and LRU eviction."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ModelTooLarge

THRASH_WINDOW = 100


@dataclass
class CacheEntry:
    model_id: str
    level: str
    bytes: int
    last_used_time: float = 0.0
    pinned_count: int = 0
    loading: bool = False
    last_used_seq: int = 0

    @property
    def evictable(self) -> bool:
        return self.pinned_count == 0 and not self.loading


class CacheFull(Exception):
    """Every candidate victim is pinned; nothing can be made resident right now."""


class CacheLevel:
    def __init__(self, level: str, capacity: int):
        self.level = level
        self.capacity = int(capacity)
        self.entries: dict[str, CacheEntry] = {}

    @property
    def used_bytes(self) -> int:
        return sum(e.bytes for e in self.entries.values())

    def __contains__(self, model_id: str) -> bool:
        return model_id in self.entries

    def get(self, model_id: str) -> CacheEntry | None:
        return self.entries.get(model_id)

    def resident(self, model_id: str) -> bool:
        e = self.entries.get(model_id)
        return e is not None and not e.loading

    def victims_for(self, nbytes: int) -> list[CacheEntry]:
        """LRU unpinned entries whose removal frees ``nbytes``; raises if impossible."""
        if nbytes > self.capacity:
            raise ModelTooLarge(f"{nbytes} bytes exceed {self.level} capacity {self.capacity}")
        free = self.capacity - self.used_bytes
        if free >= nbytes:
            return []
        chosen = []
        for e in sorted((e for e in self.entries.values() if e.evictable),
                        key=lambda e: (e.last_used_time, e.last_used_seq, e.model_id)):
            chosen.append(e)
            free += e.bytes
            if free >= nbytes:
                return chosen
        raise CacheFull(f"{self.level}: {nbytes} bytes needed, pinned entries block eviction")

    def insert(self, entry: CacheEntry) -> None:
        assert entry.model_id not in self.entries
        self.entries[entry.model_id] = entry
        assert self.used_bytes <= self.capacity, "cache capacity exceeded"

    def remove(self, model_id: str) -> CacheEntry:
        entry = self.entries.pop(model_id)
        assert entry.pinned_count == 0, "pinned entry evicted"
        return entry

    def touch(self, model_id: str, now: float, seq: int) -> None:
        e = self.entries.get(model_id)
        if e is not None:
            e.last_used_time = now
            e.last_used_seq = seq

    def occupancy(self) -> dict:
        return {
            "capacity": self.capacity,
            "used": self.used_bytes,
            "entries": [
                {"model_id": e.model_id, "bytes": e.bytes, "pinned": e.pinned_count,
                 "loading": e.loading, "last_used": e.last_used_time}
                for e in sorted(self.entries.values(), key=lambda e: e.model_id)
            ],
        }


@dataclass
class ResidencyJob:
    kind: str          # "fetch" (remote -> host) or "transfer" (host -> device)
    model_id: str
    bytes: int


@dataclass
class ResidencyPlan:
    jobs: list[ResidencyJob] = field(default_factory=list)
    evictions: list[tuple[str, str]] = field(default_factory=list)   # (level, model_id)
    warnings: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.jobs and not self.evictions


class CacheHierarchy:
    """Remote store -> host memory -> device memory."""

    def __init__(self, device_bytes: int, host_bytes: int):
        self.device = CacheLevel("device", device_bytes)
        self.host = CacheLevel("host", host_bytes)
        self.seq = 0

    def level(self, name: str) -> CacheLevel:
        return self.device if name == "device" else self.host

    def plan(self, model_id: str, nbytes: int, target_level: str) -> ResidencyPlan:
        """Jobs and evictions raising ``model_id`` to ``target_level``; does not mutate."""
        plan = ResidencyPlan()
        need_device = target_level == "device" and model_id not in self.device
        need_host = model_id not in self.host and (target_level == "host" or need_device)
        if need_device and self.device.capacity < nbytes:
            raise ModelTooLarge(f"{model_id}: {nbytes} bytes exceed device memory {self.device.capacity}")
        if need_host:
            for v in self.host.victims_for(nbytes):
                plan.evictions.append(("host", v.model_id))
                self._thrash_check(plan, v)
            plan.jobs.append(ResidencyJob("fetch", model_id, nbytes))
        if need_device:
            for v in self.device.victims_for(nbytes):
                plan.evictions.append(("device", v.model_id))
                self._thrash_check(plan, v)
            plan.jobs.append(ResidencyJob("transfer", model_id, nbytes))
        return plan

    def _thrash_check(self, plan: ResidencyPlan, victim: CacheEntry) -> None:
        if self.seq - victim.last_used_seq < THRASH_WINDOW and victim.last_used_seq > 0:
            plan.warnings.append(
                f"CacheThrash: evicting {victim.model_id} from {victim.level}, used "
                f"{self.seq - victim.last_used_seq} requests ago"
            )

    def apply(self, plan: ResidencyPlan, now: float) -> None:
        """Evict, then reserve space for each job's target as a loading entry."""
        for level, model_id in plan.evictions:
            self.level(level).remove(model_id)
        for job in plan.jobs:
            level = self.host if job.kind == "fetch" else self.device
            level.insert(CacheEntry(job.model_id, level.level, job.bytes, now, loading=True,
                                    last_used_seq=self.seq))
        self.check()

    def check(self) -> None:
        for level in (self.device, self.host):
            assert level.used_bytes <= level.capacity, f"{level.level} over capacity"
