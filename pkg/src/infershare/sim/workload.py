"""Synthetic arrival processes, each on its own seeded stream."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigInvalid, TraceParseError

PATTERNS = ("poisson", "burst", "sporadic", "replay")


@dataclass(frozen=True)
class WorkloadSpec:
    tenant_id: str
    model_id: str
    pattern: str = "poisson"
    rate: float = 0.0               # inf/s (poisson)
    low: float = 0.0                # inf/s (burst)
    high: float = 0.0
    period_ms: float = 0.0          # burst: one low half then one high half
    mean_gap_ms: float = 0.0        # sporadic
    trace: str | None = None        # replay: path or inline text
    deadline_ms: float | None = None
    start_ms: float = 0.0
    duration_ms: float = 0.0
    batch: int = 1
    seed: int = 0
    hit_ratio: float | None = None  # forces host->device copies on a 1-h fraction of requests

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigInvalid(f"unknown arrival pattern {self.pattern!r}")
        for name in ("rate", "low", "high", "period_ms", "mean_gap_ms", "duration_ms", "start_ms"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be non-negative")
        if self.pattern == "burst" and self.period_ms <= 0:
            raise ConfigInvalid("burst pattern needs period_ms > 0")
        if self.pattern == "sporadic" and self.mean_gap_ms <= 0:
            raise ConfigInvalid("sporadic pattern needs mean_gap_ms > 0")
        if self.pattern == "replay" and self.trace is None:
            raise ConfigInvalid("replay pattern needs a trace")
        if self.batch < 1:
            raise ConfigInvalid("batch must be >= 1")
        if self.hit_ratio is not None and not 0.0 <= self.hit_ratio <= 1.0:
            raise ConfigInvalid("hit_ratio must lie in [0, 1]")


def stream(seed: int, tenant_id: str, model_id: str) -> np.random.Generator:
    """PRNG keyed by (seed, tenant, model): adding a workload never perturbs another."""
    digest = hashlib.sha256(f"{tenant_id}\0{model_id}".encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    seed = int(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *words])))


def parse_trace(text: str) -> list[float]:
    """One arrival time (ms) per line; blank lines and '#' comments are ignored."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            t = float(line)
        except ValueError:
            raise TraceParseError(f"line {lineno}: not a number: {raw!r}") from None
        if not np.isfinite(t) or t < 0:
            raise TraceParseError(f"line {lineno}: arrival must be finite and >= 0")
        if out and t < out[-1]:
            raise TraceParseError(f"line {lineno}: arrivals must be non-decreasing")
        out.append(t)
    return out


def _load_trace(trace: str) -> str:
    if "\n" not in trace and Path(trace).is_file():
        return Path(trace).read_text()
    return trace


def _poisson(rng, rate_per_s: float, t0: float, t1: float, out: list[float]) -> None:
    if rate_per_s <= 0:
        return
    mean_gap = 1000.0 / rate_per_s
    t = t0
    while True:
        t += rng.exponential(mean_gap)
        if t >= t1:
            return
        out.append(t)


def generate_arrivals(spec: WorkloadSpec, seed: int | None = None) -> list[float]:
    """Ordered arrival times in ms for ``spec``."""
    rng = stream(spec.seed if seed is None else seed, spec.tenant_id, spec.model_id)
    t0, t1 = spec.start_ms, spec.start_ms + spec.duration_ms
    out: list[float] = []
    if spec.pattern == "poisson":
        _poisson(rng, spec.rate, t0, t1, out)
    elif spec.pattern == "burst":
        # square wave; the exponential is memoryless, so restarting at each edge is exact
        half = spec.period_ms / 2.0
        t, high = t0, False
        while t < t1:
            edge = min(t + half, t1)
            _poisson(rng, spec.high if high else spec.low, t, edge, out)
            t, high = edge, not high
    elif spec.pattern == "sporadic":
        t = t0
        while True:
            t += rng.exponential(spec.mean_gap_ms)
            if t >= t1:
                break
            out.append(t)
    else:
        out = [t0 + a for a in parse_trace(_load_trace(spec.trace))]
    return out


def forced_misses(n: int, hit_ratio: float) -> list[bool]:
    """Evenly spread miss pattern: exactly floor(n * (1 - h)) misses in the first n requests."""
    miss = 1.0 - hit_ratio
    return [int((i + 1) * miss + 1e-9) > int(i * miss + 1e-9) for i in range(n)]
