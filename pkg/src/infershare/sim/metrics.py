"""Metrics as a pure fold over the event trace, plus work-based billing.

Trace records are JSON objects, one per line, distinguished by ``ev``:

``meta``      scenario name, seed, mode
``arrival``   t, origin, tenant, model
``done``      a completion record (see :class:`infershare.worker.CompletionRecord`)
``reject``    t, rid, origin, tenant, model, worker, reason
``cancel`` / ``reroute`` / ``lost``   t, rid, origin, tenant, model, worker
``stage``     worker, resource, start, end, model, n
``replica``   t, model, worker, action (``load`` | ``routable`` | ``removed``)
``worker``    t, worker, state (``joined`` | ``failed`` | ``detected`` | ``vm-up`` | ``vm-down``)
``scale``     t, model, demand, target
``end``       t
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from ..errors import TraceParseError

MS_PER_HOUR = 3_600_000.0

REPORT_COLUMNS = (
    "tenant", "model", "arrivals", "done", "rejected", "cancelled", "failed",
    "mean_ms", "p50_ms", "p99_ms", "max_ms", "exec_mean_ms", "exec_p99_ms",
    "slo_violation_fraction", "rejection_fraction",
    "device_hit_ratio", "host_hit_ratio", "cold_ratio", "inflight_ratio", "charge_usd",
)
UTILIZATION_COLUMNS = ("worker", "resource", "busy_ms", "elapsed_ms", "utilization")


def nearest_rank(sorted_values: list[float], pct: float) -> float:
    """Nearest-rank percentile of an already sorted sample (no interpolation)."""
    if not sorted_values:
        return math.nan
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values) - 1e-9))
    return sorted_values[rank - 1]


def mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


class BillingLedger:
    """Per-tenant charges for work done.

    Amounts are summed with :func:`math.fsum`, which is exactly rounded, so a
    tenant's total does not depend on the order its charges arrived in.
    """

    def __init__(self, link_cost_per_hour: float = 0.0):
        self.link_cost_per_hour = link_cost_per_hour
        self._amounts: dict[str, list[float]] = {}

    def _add(self, tenant_id: str, amount: float) -> None:
        if amount < 0 or not math.isfinite(amount):
            raise ValueError(f"invalid charge {amount!r}")
        self._amounts.setdefault(tenant_id, []).append(amount)

    def charge(self, record: Mapping) -> float:
        """Bill one completed request; anything that did not complete costs nothing."""
        if record.get("ev", "done") != "done":
            self._amounts.setdefault(record["tenant_id"] if "tenant_id" in record else record["tenant"], [])
            return 0.0
        amount = request_charge(record["device_ms"], record["cost_per_hour"],
                                record.get("transfer_ms", 0.0), self.link_cost_per_hour)
        self._add(record["tenant_id"], amount)
        return amount

    def charge_uptime(self, tenant_id: str, uptime_ms: float, cost_per_hour: float) -> float:
        """Dedicated-machine billing (the comparison baseline): every powered-on millisecond."""
        amount = uptime_ms * cost_per_hour / MS_PER_HOUR
        self._add(tenant_id, amount)
        return amount

    def total(self, tenant_id: str) -> float:
        return math.fsum(self._amounts.get(tenant_id, ()))

    def tenants(self) -> list[str]:
        return sorted(self._amounts)

    def totals(self) -> dict[str, float]:
        return {t: self.total(t) for t in self.tenants()}


def request_charge(device_ms: float, cost_per_hour: float, transfer_ms: float = 0.0,
                   link_cost_per_hour: float = 0.0) -> float:
    return device_ms * cost_per_hour / MS_PER_HOUR + transfer_ms * link_cost_per_hour / MS_PER_HOUR


def charge(ledger: BillingLedger, record: Mapping) -> BillingLedger:
    ledger.charge(record)
    return ledger


@dataclass
class GroupStats:
    tenant: str
    model: str
    arrivals: int = 0
    done: int = 0
    rejected: int = 0
    cancelled: int = 0
    failed: int = 0
    mean_ms: float = math.nan
    p50_ms: float = math.nan
    p99_ms: float = math.nan
    max_ms: float = math.nan
    exec_mean_ms: float = math.nan
    exec_p99_ms: float = math.nan
    slo_violation_fraction: float = 0.0
    rejection_fraction: float = 0.0
    device_hit_ratio: float = 0.0
    host_hit_ratio: float = 0.0
    cold_ratio: float = 0.0
    inflight_ratio: float = 0.0
    charge_usd: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class MetricsReport:
    scenario: str = ""
    seed: int = 0
    mode: str = "shared"
    elapsed_ms: float = 0.0
    groups: dict[tuple[str, str], GroupStats] = field(default_factory=dict)
    charges: dict[str, float] = field(default_factory=dict)
    utilization: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)  # busy, elapsed
    latencies: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    exec_latencies: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    throughput: float = 0.0
    outcomes: dict[str, int] = field(default_factory=dict)
    arrivals: int = 0
    warnings: list[str] = field(default_factory=list)

    def group(self, tenant: str, model: str) -> GroupStats:
        return self.groups[(tenant, model)]

    def util(self, worker: str, resource: str) -> float:
        busy, elapsed = self.utilization.get((worker, resource), (0.0, self.elapsed_ms))
        return busy / elapsed if elapsed > 0 else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for key in sorted(self.groups):
            w.writerow([_fmt(v) for v in self.groups[key].row()])
        return buf.getvalue()

    def utilization_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(UTILIZATION_COLUMNS)
        for (worker, resource), (busy, elapsed) in sorted(self.utilization.items()):
            w.writerow([worker, resource, _fmt(busy), _fmt(elapsed), _fmt(busy / elapsed if elapsed else 0.0)])
        return buf.getvalue()

    def to_document(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "mode": self.mode,
            "elapsed_ms": self.elapsed_ms,
            "arrivals": self.arrivals,
            "throughput_per_s": self.throughput,
            "outcomes": dict(sorted(self.outcomes.items())),
            "charges_usd": dict(sorted(self.charges.items())),
            "groups": [dict(zip(REPORT_COLUMNS, (_json(v) for v in self.groups[k].row())))
                       for k in sorted(self.groups)],
            "utilization": [
                {"worker": wk, "resource": r, "busy_ms": b, "elapsed_ms": e,
                 "utilization": b / e if e else 0.0}
                for (wk, r), (b, e) in sorted(self.utilization.items())
            ],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _json(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def read_trace(lines: Iterable[str]) -> Iterator[dict]:
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"trace line {lineno}: {exc}") from None
        if not isinstance(rec, dict) or "ev" not in rec:
            raise TraceParseError(f"trace line {lineno}: record without 'ev'")
        yield rec


_OUTCOME = {"done": "done", "reject": "rejected", "cancel": "cancelled", "lost": "failed"}


def compute_report(trace: Iterable[Mapping], link_cost_per_hour: float = 0.0) -> MetricsReport:
    """Fold a complete event trace into a report. Deterministic in the trace alone."""
    rep = MetricsReport()
    ledger = BillingLedger(link_cost_per_hour)
    final: dict[str, str] = {}          # origin -> final outcome
    origin_group: dict[str, tuple[str, str]] = {}
    deadline_of: dict[str, float | None] = {}
    residency: dict[tuple[str, str], dict[str, int]] = {}
    busy: dict[tuple[str, str], float] = {}
    vm_up: dict[str, tuple[float, str, float]] = {}
    end_t = 0.0
    done_late: dict[tuple[str, str], int] = {}
    group_amounts: dict[tuple[str, str], list[float]] = {}
    vm_group: dict[str, tuple[str, str]] = {}

    for rec in trace:
        ev = rec["ev"]
        if ev == "meta":
            rep.scenario = rec.get("scenario", "")
            rep.seed = rec.get("seed", 0)
            rep.mode = rec.get("mode", "shared")
        elif ev == "arrival":
            key = (rec["tenant"], rec["model"])
            origin_group[rec["origin"]] = key
            deadline_of[rec["origin"]] = rec.get("deadline_ms")
            rep.arrivals += 1
            if key not in rep.groups:
                rep.groups[key] = GroupStats(*key)
            rep.groups[key].arrivals += 1
            end_t = max(end_t, rec["t"])
        elif ev == "done":
            key = (rec["tenant_id"], rec["model_id"])
            final[rec["origin"]] = "done"
            lat = rec["finish_time"] - rec["arrival_time"]
            rep.latencies.setdefault(key, []).append(lat)
            rep.exec_latencies.setdefault(key, []).append(rec["exec_ms"])
            res = residency.setdefault(key, {})
            res[rec["residency"]] = res.get(rec["residency"], 0) + 1
            dl = rec.get("deadline_ms")
            if dl is not None and lat > dl + 1e-9:
                done_late[key] = done_late.get(key, 0) + 1
            if rep.mode != "vm":    # dedicated machines bill uptime instead
                group_amounts.setdefault(key, []).append(ledger.charge(rec))
            end_t = max(end_t, rec["finish_time"])
        elif ev in ("reject", "cancel", "lost"):
            final[rec["origin"]] = _OUTCOME[ev]
        elif ev == "reroute":
            pass  # the origin continues elsewhere; its last outcome wins
        elif ev == "stage":
            k = (rec["worker"], rec["resource"])
            busy[k] = busy.get(k, 0.0) + (rec["end"] - rec["start"])
            end_t = max(end_t, rec["end"])
        elif ev == "worker":
            if rec["state"] == "vm-up":
                vm_up[rec["worker"]] = (rec["t"], rec["tenant"], rec["cost_per_hour"])
                vm_group[rec["worker"]] = (rec["tenant"], rec["model"])
            elif rec["state"] == "vm-down" and rec["worker"] in vm_up:
                t0, tenant, cost = vm_up.pop(rec["worker"])
                amount = ledger.charge_uptime(tenant, rec["t"] - t0, cost)
                group_amounts.setdefault(vm_group[rec["worker"]], []).append(amount)
        elif ev == "end":
            end_t = max(end_t, rec["t"])

    for wid, (t0, tenant, cost) in sorted(vm_up.items()):
        amount = ledger.charge_uptime(tenant, end_t - t0, cost)
        group_amounts.setdefault(vm_group[wid], []).append(amount)
    rep.elapsed_ms = end_t

    outcome_counts: dict[tuple[str, str], dict[str, int]] = {}
    for origin, key in origin_group.items():
        out = final.get(origin, "failed")
        c = outcome_counts.setdefault(key, {})
        c[out] = c.get(out, 0) + 1
        rep.outcomes[out] = rep.outcomes.get(out, 0) + 1

    charges = ledger.totals()
    for key, g in sorted(rep.groups.items()):
        c = outcome_counts.get(key, {})
        g.done, g.rejected = c.get("done", 0), c.get("rejected", 0)
        g.cancelled, g.failed = c.get("cancelled", 0), c.get("failed", 0)
        lats = sorted(rep.latencies.get(key, []))
        ex = sorted(rep.exec_latencies.get(key, []))
        if lats:
            g.mean_ms, g.p50_ms, g.p99_ms, g.max_ms = mean(lats), nearest_rank(lats, 50), nearest_rank(lats, 99), lats[-1]
            g.exec_mean_ms, g.exec_p99_ms = mean(ex), nearest_rank(ex, 99)
            res = residency.get(key, {})
            n = len(lats)
            g.device_hit_ratio = res.get("device-hit", 0) / n
            g.host_hit_ratio = res.get("host-hit", 0) / n
            g.cold_ratio = res.get("cold", 0) / n
            g.inflight_ratio = res.get("inflight", 0) / n
        with_deadline = [o for o, k in origin_group.items() if k == key and deadline_of.get(o) is not None]
        if with_deadline:
            missed = sum(1 for o in with_deadline if final.get(o) != "done") + done_late.get(key, 0)
            g.slo_violation_fraction = missed / len(with_deadline)
        g.rejection_fraction = g.rejected / g.arrivals if g.arrivals else 0.0
        g.charge_usd = math.fsum(group_amounts.get(key, ()))
    tenants = set(charges) | {t for t, _ in rep.groups}
    rep.charges = {t: charges.get(t, 0.0) for t in sorted(tenants)}
    rep.utilization = {k: (b, end_t) for k, b in sorted(busy.items())}
    done_total = rep.outcomes.get("done", 0)
    rep.throughput = done_total / (end_t / 1000.0) if end_t > 0 else 0.0
    return rep
