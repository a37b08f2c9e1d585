"""Cluster and scenario configuration (TOML, schema version 1)."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid
from .predictor import DeviceProfile, lognormal_sigma_for_ratio, reference_profiles
from .scheduling import POLICIES
from .sim.workload import WorkloadSpec

SCHEMA_VERSION = 1
MODES = ("shared", "vm")


@dataclass(frozen=True)
class WorkerDef:
    worker_id: str
    profile: str
    host_cache_bytes: int
    address: str | None = None


@dataclass(frozen=True)
class ModelDef:
    model_id: str
    tenant_id: str
    manifest: str              # bundled name or path
    replicas: int = 1


@dataclass(frozen=True)
class FailureDef:
    worker_id: str
    at_ms: float
    rejoin_ms: float | None = None


@dataclass(frozen=True)
class ClusterConfig:
    controller_address: str = "127.0.0.1:7400"
    workers: tuple[WorkerDef, ...] = ()
    profiles: Mapping[str, DeviceProfile] = field(default_factory=dict)
    policy: str = "fifo"
    fair: bool = False
    batching: bool = False
    noise: bool = False
    noise_p99_over_mean: float = 1.15
    admission_ceiling_ms: float = 1000.0
    tenant_ceiling_ms: float | None = None
    tenant_weights: Mapping[str, int] = field(default_factory=dict)
    demand_window_ms: float = 1000.0
    heartbeat_ms: float = 500.0
    demand_decay: float = 0.3
    utilization_target: float = 0.8
    saturation_threshold: float = 0.7
    min_replicas: int = 1
    autoscale: bool = True
    migrate: bool = False
    reroute_interval_ms: float = 0.0
    mode: str = "shared"
    vm_cold_start_ms: float = 12000.0
    vm_idle_teardown_ms: float = 600000.0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigInvalid(f"unknown policy {self.policy!r}")
        if self.mode not in MODES:
            raise ConfigInvalid(f"unknown mode {self.mode!r}")
        ids, addrs = set(), set()
        for w in self.workers:
            if w.profile not in self.profiles:
                raise ConfigInvalid(f"worker {w.worker_id} references undefined profile {w.profile!r}")
            if w.worker_id in ids:
                raise ConfigInvalid(f"duplicate worker id {w.worker_id!r}")
            ids.add(w.worker_id)
            if w.address is not None:
                if w.address in addrs or w.address == self.controller_address:
                    raise ConfigInvalid(f"duplicate address {w.address!r}")
                addrs.add(w.address)
            if w.host_cache_bytes <= 0:
                raise ConfigInvalid(f"worker {w.worker_id}: host_cache_bytes must be positive")
        for name in ("admission_ceiling_ms", "demand_window_ms", "heartbeat_ms"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")
        if not 1.0 < self.noise_p99_over_mean < 2.0:
            raise ConfigInvalid("noise p99_over_mean must lie in (1, 2)")
        if self.min_replicas < 1:
            raise ConfigInvalid("min_replicas must be >= 1")

    @property
    def noise_sigma(self) -> float:
        return lognormal_sigma_for_ratio(self.noise_p99_over_mean)

    def profile_of(self, worker_id: str) -> DeviceProfile:
        for w in self.workers:
            if w.worker_id == worker_id:
                return self.profiles[w.profile]
        raise KeyError(worker_id)


@dataclass(frozen=True)
class Scenario:
    name: str
    cluster: ClusterConfig
    models: tuple[ModelDef, ...]
    workloads: tuple[WorkloadSpec, ...]
    failures: tuple[FailureDef, ...] = ()
    duration_ms: float = 0.0
    seed: int = 0
    bounds: Mapping[str, Any] = field(default_factory=dict)
    sweep: Mapping[str, Any] = field(default_factory=dict)
    description: str = ""

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed, workloads=tuple(replace(w, seed=seed) for w in self.workloads))

    def with_cluster(self, **changes) -> "Scenario":
        return replace(self, cluster=replace(self.cluster, **changes))


def _get(table: Mapping, key: str, kind, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigInvalid(f"missing key {key!r}")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
        raise ConfigInvalid(f"key {key!r} must be {kind.__name__}, got {type(value).__name__}")
    return value


def _profiles(doc: Mapping) -> dict[str, DeviceProfile]:
    profiles = dict(reference_profiles())
    for name, table in doc.get("profiles", {}).items():
        base = profiles.get(table.get("base", name))
        fields = {} if base is None else base.to_document()
        fields.update({k: v for k, v in table.items() if k != "base"})
        fields["device_id"] = name
        try:
            profiles[name] = DeviceProfile.from_document(fields)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"profile {name!r}: {exc}") from None
    return profiles


def parse_scenario(text: str, *, base_dir: Path | None = None) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"not valid TOML: {exc}") from None
    schema = doc.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigInvalid(f"unsupported scenario schema {schema!r}")
    cl = doc.get("cluster", {})
    workers = tuple(
        WorkerDef(
            worker_id=_get(w, "id", str, required=True),
            profile=_get(w, "profile", str, required=True),
            host_cache_bytes=int(_get(w, "host_cache_bytes", (int, float), 8 * 10**9)),
            address=_get(w, "address", str),
        )
        for w in doc.get("workers", [])
    )
    seed = _get(doc, "seed", int, 0)
    duration = _get(doc, "duration_ms", float, 0.0)
    weights = cl.get("tenant_weights", {})
    if not all(isinstance(v, int) and v >= 1 for v in weights.values()):
        raise ConfigInvalid("tenant_weights must be positive integers")
    noise = cl.get("noise", {})
    cluster = ClusterConfig(
        controller_address=_get(cl, "controller_address", str, "127.0.0.1:7400"),
        workers=workers,
        profiles=_profiles(doc),
        policy=_get(cl, "policy", str, "fifo"),
        fair=_get(cl, "fair", bool, False),
        batching=_get(cl, "batching", bool, False),
        noise=_get(noise, "enabled", bool, False),
        noise_p99_over_mean=_get(noise, "p99_over_mean", float, 1.15),
        admission_ceiling_ms=_get(cl, "admission_ceiling_ms", float, 1000.0),
        tenant_ceiling_ms=_get(cl, "tenant_ceiling_ms", float),
        tenant_weights=dict(weights),
        demand_window_ms=_get(cl, "demand_window_ms", float, 1000.0),
        heartbeat_ms=_get(cl, "heartbeat_ms", float, 500.0),
        demand_decay=_get(cl, "demand_decay", float, 0.3),
        utilization_target=_get(cl, "utilization_target", float, 0.8),
        saturation_threshold=_get(cl, "saturation_threshold", float, 0.7),
        min_replicas=_get(cl, "min_replicas", int, 1),
        autoscale=_get(cl, "autoscale", bool, True),
        migrate=_get(cl, "migrate", bool, False),
        reroute_interval_ms=_get(cl, "reroute_interval_ms", float, 0.0),
        mode=_get(cl, "mode", str, "shared"),
        vm_cold_start_ms=_get(cl, "vm_cold_start_ms", float, 12000.0),
        vm_idle_teardown_ms=_get(cl, "vm_idle_teardown_ms", float, 600000.0),
    )
    models = tuple(
        ModelDef(
            model_id=_get(m, "id", str, required=True),
            tenant_id=_get(m, "tenant", str, required=True),
            manifest=_get(m, "manifest", str, required=True),
            replicas=_get(m, "replicas", int, 1),
        )
        for m in doc.get("models", [])
    )
    known = {m.model_id for m in models}
    workloads = []
    for w in doc.get("workloads", []):
        model = _get(w, "model", str, required=True)
        if model not in known:
            raise ConfigInvalid(f"workload references unknown model {model!r}")
        trace = _get(w, "trace", str)
        if trace is not None and base_dir is not None and "\n" not in trace and not Path(trace).is_absolute():
            candidate = base_dir / trace
            if candidate.is_file():
                trace = str(candidate)
        workloads.append(WorkloadSpec(
            tenant_id=_get(w, "tenant", str, required=True),
            model_id=model,
            pattern=_get(w, "pattern", str, "poisson"),
            rate=_get(w, "rate", float, 0.0),
            low=_get(w, "low", float, 0.0),
            high=_get(w, "high", float, 0.0),
            period_ms=_get(w, "period_ms", float, 0.0),
            mean_gap_ms=_get(w, "mean_gap_ms", float, 0.0),
            trace=trace,
            deadline_ms=_get(w, "deadline_ms", float),
            start_ms=_get(w, "start_ms", float, 0.0),
            duration_ms=_get(w, "duration_ms", float, duration),
            batch=_get(w, "batch", int, 1),
            seed=seed,
            hit_ratio=_get(w, "hit_ratio", float),
        ))
    failures = tuple(
        FailureDef(_get(f, "worker", str, required=True), _get(f, "at_ms", float, required=True),
                   _get(f, "rejoin_ms", float))
        for f in doc.get("failures", [])
    )
    ids = {w.worker_id for w in workers}
    for f in failures:
        if f.worker_id not in ids:
            raise ConfigInvalid(f"failure references unknown worker {f.worker_id!r}")
    return Scenario(
        name=_get(doc, "name", str, "scenario"),
        cluster=cluster,
        models=models,
        workloads=tuple(workloads),
        failures=failures,
        duration_ms=duration,
        seed=seed,
        bounds=dict(doc.get("bounds", {})),
        sweep=dict(doc.get("sweep", {})),
        description=_get(doc, "description", str, ""),
    )


def bundled_scenario_names() -> list[str]:
    root = resources.files("infershare.data.scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".toml"))


def scenario_path(name: str) -> Path:
    """Resolve a file path, falling back to the bundled scenario of that name."""
    p = Path(name)
    if p.is_file():
        return p
    bundled = resources.files("infershare.data.scenarios") / (name if name.endswith(".toml") else name + ".toml")
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigInvalid(f"no scenario file {name!r}")


def load_scenario(name: str) -> Scenario:
    path = scenario_path(name)
    return parse_scenario(path.read_text(), base_dir=path.parent)
