"""Restricted model-description format: types, parser, serializer, cost model.

A manifest is a fixed DAG of layers drawn from a closed catalogue. There is
no way to express user code or control flow; anything outside the catalogue
is rejected at parse time.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from math import prod
from typing import Iterable, Mapping, Sequence

from .errors import (
    CyclicGraph,
    MalformedDocument,
    ShapeMismatch,
    UnknownLayerKind,
    WeightByteMismatch,
    ManifestError,
)

HEADER = "infershare-manifest v1"
INPUT_REF = "input"
BYTES_PER_WEIGHT = 4

CATALOGUE = (
    "dense",
    "conv2d",
    "relu",
    "maxpool2d",
    "globalavgpool",
    "flatten",
    "add",
    "softmax",
)
WEIGHTED_KINDS = ("dense", "conv2d")

# kind -> (required params, optional params with defaults); None means "same as kernel"
_PARAM_SCHEMA: dict[str, tuple[tuple[str, ...], dict[str, int | None]]] = {
    "dense": (("units",), {}),
    "conv2d": (("out_channels", "kernel_h", "kernel_w"), {"stride": 1, "pad": 0}),
    "maxpool2d": (("kernel",), {"stride": None, "pad": 0}),
    "relu": ((), {}),
    "globalavgpool": ((), {}),
    "flatten": ((), {}),
    "add": ((), {}),
    "softmax": ((), {}),
}
_ARITY = {kind: 2 if kind == "add" else 1 for kind in CATALOGUE}

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class TensorShape:
    """Element counts per axis. ``dims[0]`` is the batch axis; ``None`` marks it variable."""

    dims: tuple[int | None, ...]

    def __post_init__(self):
        if not self.dims:
            raise ShapeMismatch("shape must have at least one axis")
        for i, d in enumerate(self.dims):
            if d is None:
                if i != 0:
                    raise ShapeMismatch("only axis 0 may be variable")
            elif not isinstance(d, int) or isinstance(d, bool) or d < 1:
                raise ShapeMismatch(f"invalid dimension {d!r}")

    @classmethod
    def parse(cls, text: str) -> "TensorShape":
        dims: list[int | None] = []
        for i, part in enumerate(text.strip().split("x")):
            if part == "*":
                dims.append(None)
            else:
                try:
                    dims.append(int(part))
                except ValueError:
                    raise MalformedDocument(f"bad shape {text!r}") from None
        try:
            return cls(tuple(dims))
        except ShapeMismatch as exc:
            raise MalformedDocument(f"bad shape {text!r}: {exc}") from None

    @classmethod
    def of(cls, *dims: int | None) -> "TensorShape":
        return cls(tuple(dims))

    def __str__(self) -> str:
        return "x".join("*" if d is None else str(d) for d in self.dims)

    @property
    def variable_batch(self) -> bool:
        return self.dims[0] is None

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def sample_dims(self) -> tuple[int, ...]:
        return tuple(self.dims[1:])  # type: ignore[arg-type]

    def element_count(self, batch: int | None = None) -> int:
        b = self.dims[0] if batch is None else batch
        if b is None:
            raise ShapeMismatch("batch must be given for a variable-batch shape")
        return b * prod(self.sample_dims)

    def resolve(self, batch: int) -> tuple[int, ...]:
        if self.dims[0] is not None and self.dims[0] != batch:
            raise ShapeMismatch(f"shape {self} has fixed batch {self.dims[0]}, got {batch}")
        return (batch,) + self.sample_dims

    def with_batch_of(self, other: "TensorShape") -> "TensorShape":
        return TensorShape((other.dims[0],) + self.sample_dims)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: Mapping[str, int]
    input_refs: tuple[str, ...]
    output_shape: TensorShape
    weight_bytes: int

    def param(self, key: str) -> int:
        return self.params[key]


@dataclass(frozen=True)
class ModelManifest:
    model_name: str
    version: int
    input_shape: TensorShape
    layers: tuple[LayerSpec, ...]
    total_weight_bytes: int
    declared_footprint_bytes: int
    weight_seed: int = 0

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def shape_of(self, ref: str) -> TensorShape:
        return self.input_shape if ref == INPUT_REF else self.layer(ref).output_shape

    @property
    def output_ref(self) -> str:
        return self.layers[-1].name if self.layers else INPUT_REF

    @property
    def output_shape(self) -> TensorShape:
        return self.shape_of(self.output_ref)


@dataclass(frozen=True)
class Finding:
    code: str
    layer: str | None
    message: str

    def __str__(self) -> str:
        where = f" [{self.layer}]" if self.layer else ""
        return f"{self.code}{where}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]


# ---------------------------------------------------------------------------
# shape rules and costs


def normalize_params(kind: str, params: Mapping[str, int]) -> dict[str, int]:
    """Fill defaults and check the parameter set for ``kind``."""
    if kind not in _PARAM_SCHEMA:
        raise UnknownLayerKind(kind)
    required, optional = _PARAM_SCHEMA[kind]
    unknown = set(params) - set(required) - set(optional)
    if unknown:
        raise MalformedDocument(f"{kind}: unknown params {sorted(unknown)}")
    out: dict[str, int] = {}
    for key in required:
        if key not in params:
            raise MalformedDocument(f"{kind}: missing param {key!r}")
        out[key] = int(params[key])
    for key, default in optional.items():
        if key in params:
            out[key] = int(params[key])
        elif default is None:
            out[key] = out["kernel"]
        else:
            out[key] = default
    for key, value in out.items():
        floor = 0 if key == "pad" else 1
        if value < floor:
            raise MalformedDocument(f"{kind}: param {key}={value} below {floor}")
    return out


def _window_out(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeMismatch(f"window {kernel} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def infer_sample_dims(kind: str, params: Mapping[str, int], inputs: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    """Per-sample output dims (batch axis excluded) from per-sample input dims."""
    if len(inputs) != _ARITY[kind]:
        raise ShapeMismatch(f"{kind} takes {_ARITY[kind]} input(s), got {len(inputs)}")
    x = inputs[0]
    if kind == "dense":
        if len(x) != 1:
            raise ShapeMismatch(f"dense expects a rank-2 input, got per-sample dims {x}")
        return (params["units"],)
    if kind in ("conv2d", "maxpool2d"):
        if len(x) != 3:
            raise ShapeMismatch(f"{kind} expects NCHW input, got per-sample dims {x}")
        c, h, w = x
        if kind == "conv2d":
            ho = _window_out(h, params["kernel_h"], params["stride"], params["pad"])
            wo = _window_out(w, params["kernel_w"], params["stride"], params["pad"])
            return (params["out_channels"], ho, wo)
        k = params["kernel"]
        if params["pad"] >= k:
            raise ShapeMismatch("maxpool2d pad must be smaller than kernel")
        return (c, _window_out(h, k, params["stride"], params["pad"]), _window_out(w, k, params["stride"], params["pad"]))
    if kind == "globalavgpool":
        if len(x) != 3:
            raise ShapeMismatch(f"globalavgpool expects NCHW input, got per-sample dims {x}")
        return (x[0], 1, 1)
    if kind == "flatten":
        return (prod(x),)
    if kind == "add":
        if inputs[0] != inputs[1]:
            raise ShapeMismatch(f"add operands differ: {inputs[0]} vs {inputs[1]}")
        return x
    if kind in ("relu", "softmax"):
        return x
    raise UnknownLayerKind(kind)


def layer_param_count(kind: str, params: Mapping[str, int], inputs: Sequence[tuple[int, ...]]) -> int:
    if kind == "dense":
        fan_in = inputs[0][0]
        return fan_in * params["units"] + params["units"]
    if kind == "conv2d":
        cin = inputs[0][0]
        cout = params["out_channels"]
        return cout * cin * params["kernel_h"] * params["kernel_w"] + cout
    return 0


def expected_weight_bytes(kind: str, params: Mapping[str, int], inputs: Sequence[tuple[int, ...]]) -> int:
    return BYTES_PER_WEIGHT * layer_param_count(kind, params, inputs)


def layer_flops(layer: LayerSpec, input_shapes: Sequence[TensorShape], batch: int) -> int:
    """Exact flop count for one layer; a multiply-accumulate counts as 2."""
    if batch < 1:
        raise ShapeMismatch("batch must be positive")
    ins = [s.sample_dims for s in input_shapes]
    out = infer_sample_dims(layer.kind, layer.params, ins)
    if out != layer.output_shape.sample_dims:
        raise ShapeMismatch(
            f"{layer.name}: declared output {layer.output_shape} but inputs imply {out}"
        )
    out_elems = batch * prod(out)
    kind = layer.kind
    if kind == "dense":
        return 2 * ins[0][0] * layer.params["units"] * batch
    if kind == "conv2d":
        cout, ho, wo = out
        return 2 * layer.params["kernel_h"] * layer.params["kernel_w"] * ins[0][0] * ho * wo * cout * batch
    if kind in ("relu", "add"):
        return out_elems
    if kind == "maxpool2d":
        return layer.params["kernel"] ** 2 * out_elems
    if kind == "globalavgpool":
        return ins[0][1] * ins[0][2] * out_elems
    if kind == "softmax":
        # running max, subtract, exp, sum, divide
        return 5 * out_elems
    if kind == "flatten":
        return 0
    raise UnknownLayerKind(kind)


def model_flops(manifest: ModelManifest, batch: int = 1) -> int:
    """Flops for one forward pass at ``batch``; every kind is linear in batch."""
    if batch < 1:
        raise ShapeMismatch("batch must be positive")
    per_sample = manifest.__dict__.get("_flops_per_sample")
    if per_sample is None:
        per_sample = 0
        for layer in manifest.layers:
            shapes = [manifest.shape_of(r) for r in layer.input_refs]
            per_sample += layer_flops(layer, shapes, 1)
        object.__setattr__(manifest, "_flops_per_sample", per_sample)
    return per_sample * batch


# ---------------------------------------------------------------------------
# validation


def validate_manifest(manifest: ModelManifest) -> ValidationReport:
    """Re-derive every shape and byte count; findings are returned, not raised."""
    report = ValidationReport()
    add = report.findings.append
    names = [layer.name for layer in manifest.layers]
    position = {}
    for i, name in enumerate(names):
        if name == INPUT_REF or name in position:
            add(Finding("DuplicateName", name, "layer names must be unique and not 'input'"))
        position.setdefault(name, i)

    if _has_cycle(manifest.layers, position):
        add(Finding("CyclicGraph", None, "layer graph contains a cycle"))
        return report

    derived: dict[str, tuple[int, ...]] = {INPUT_REF: manifest.input_shape.sample_dims}
    consumed: set[str] = set()
    weight_sum = 0
    for i, layer in enumerate(manifest.layers):
        if layer.kind not in CATALOGUE:
            add(Finding("UnknownLayerKind", layer.name, f"kind {layer.kind!r} is not supported"))
            continue
        bad_ref = False
        for ref in layer.input_refs:
            if ref == INPUT_REF:
                continue
            if ref not in position:
                add(Finding("DanglingInput", layer.name, f"unknown input {ref!r}"))
                bad_ref = True
            elif position[ref] >= i:
                add(Finding("ForwardReference", layer.name, f"input {ref!r} is defined later"))
                bad_ref = True
        consumed.update(layer.input_refs)
        weight_sum += layer.weight_bytes
        if bad_ref or any(r not in derived for r in layer.input_refs):
            continue
        if layer.output_shape.dims[0] != manifest.input_shape.dims[0]:
            add(Finding("ShapeMismatch", layer.name, "batch axis differs from the model input"))
        ins = [derived[r] for r in layer.input_refs]
        try:
            params = normalize_params(layer.kind, layer.params)
            out = infer_sample_dims(layer.kind, params, ins)
        except ShapeMismatch as exc:
            add(Finding("ShapeMismatch", layer.name, str(exc)))
            continue
        except ManifestError as exc:
            add(Finding("BadParams", layer.name, str(exc)))
            continue
        if dict(params) != dict(layer.params):
            add(Finding("BadParams", layer.name, "params not normalized"))
        derived[layer.name] = out
        if out != layer.output_shape.sample_dims:
            add(Finding(
                "ShapeMismatch", layer.name,
                f"declared {layer.output_shape} but forward propagation gives {'x'.join(map(str, out))}",
            ))
        want = expected_weight_bytes(layer.kind, params, ins)
        if want != layer.weight_bytes:
            add(Finding("LayerWeightMismatch", layer.name, f"declared {layer.weight_bytes} bytes, expected {want}"))

    if weight_sum != manifest.total_weight_bytes:
        add(Finding(
            "WeightByteMismatch", None,
            f"total_weight_bytes {manifest.total_weight_bytes} != sum of layers {weight_sum}",
        ))
    if manifest.declared_footprint_bytes < manifest.total_weight_bytes:
        add(Finding("FootprintTooSmall", None, "declared footprint is below total weight bytes"))
    sinks = [n for n in names if n not in consumed]
    if manifest.layers and sinks != [manifest.output_ref]:
        add(Finding("MultipleOutputs", None, f"graph must have one sink, the last layer; sinks={sinks}"))
    return report


def _has_cycle(layers: Iterable[LayerSpec], position: Mapping[str, int]) -> bool:
    edges = {layer.name: [r for r in layer.input_refs if r in position] for layer in layers}
    state: dict[str, int] = {}
    for root in edges:
        if state.get(root):
            continue
        stack = [(root, iter(edges[root]))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return True
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(edges[nxt])))
    return False


_RAISE_FOR = {
    "ShapeMismatch": ShapeMismatch,
    "CyclicGraph": CyclicGraph,
    "UnknownLayerKind": UnknownLayerKind,
    "WeightByteMismatch": WeightByteMismatch,
    "LayerWeightMismatch": WeightByteMismatch,
}


def raise_for_findings(report: ValidationReport) -> None:
    if report.ok:
        return
    first = report.findings[0]
    exc = _RAISE_FOR.get(first.code, MalformedDocument)(str(first))
    exc.findings = list(report.findings)
    raise exc


# ---------------------------------------------------------------------------
# building


def build_manifest(
    model_name: str,
    input_shape: TensorShape,
    layers: Sequence[tuple[str, str, Sequence[str], Mapping[str, int]]],
    *,
    version: int = 1,
    footprint_bytes: int | None = None,
    weight_seed: int = 0,
) -> ModelManifest:
    """Construct a consistent manifest from (name, kind, inputs, params) tuples."""
    shapes: dict[str, tuple[int, ...]] = {INPUT_REF: input_shape.sample_dims}
    specs = []
    for name, kind, refs, params in layers:
        norm = normalize_params(kind, params)
        ins = [shapes[r] for r in refs]
        out = infer_sample_dims(kind, norm, ins)
        shapes[name] = out
        specs.append(LayerSpec(
            name=name,
            kind=kind,
            params=norm,
            input_refs=tuple(refs),
            output_shape=TensorShape((input_shape.dims[0],) + out),
            weight_bytes=expected_weight_bytes(kind, norm, ins),
        ))
    total = sum(s.weight_bytes for s in specs)
    manifest = ModelManifest(
        model_name=model_name,
        version=version,
        input_shape=input_shape,
        layers=tuple(specs),
        total_weight_bytes=total,
        declared_footprint_bytes=total if footprint_bytes is None else footprint_bytes,
        weight_seed=weight_seed,
    )
    raise_for_findings(validate_manifest(manifest))
    return manifest


def chain(model_name: str, input_shape: TensorShape, *steps: tuple[str, Mapping[str, int]], **kw) -> ModelManifest:
    """Sequential manifest helper: each step feeds the next; layers named l0, l1, ..."""
    layers = []
    prev = INPUT_REF
    for i, (kind, params) in enumerate(steps):
        name = f"l{i}"
        layers.append((name, kind, [prev], params))
        prev = name
    return build_manifest(model_name, input_shape, layers, **kw)


# ---------------------------------------------------------------------------
# text format


def serialize_manifest(manifest: ModelManifest) -> str:
    lines = [
        HEADER,
        f"model_name {manifest.model_name}",
        f"version {manifest.version}",
        f"input {manifest.input_shape}",
        f"weight_seed {manifest.weight_seed}",
        f"total_weight_bytes {manifest.total_weight_bytes}",
        f"footprint_bytes {manifest.declared_footprint_bytes}",
    ]
    for layer in manifest.layers:
        params = ",".join(f"{k}={v}" for k, v in layer.params.items())
        lines.append(
            f"layer {layer.name} {layer.kind} inputs={','.join(layer.input_refs)} "
            f"params={params} out={layer.output_shape} weight_bytes={layer.weight_bytes}"
        )
    return "\n".join(lines) + "\n"


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedDocument(f"{what}: expected integer, got {text!r}") from None


def _ident(text: str, what: str) -> str:
    if not _IDENT.match(text):
        raise MalformedDocument(f"{what}: invalid identifier {text!r}")
    return text


def _parse_layer(tokens: list[str], lineno: int, shapes: dict[str, tuple[int, ...]], batch_dim) -> LayerSpec:
    if len(tokens) < 3:
        raise MalformedDocument(f"line {lineno}: layer needs a name and a kind")
    name = _ident(tokens[1], f"line {lineno}")
    kind = tokens[2]
    if kind not in CATALOGUE:
        raise UnknownLayerKind(f"line {lineno}: layer kind {kind!r} is not in the supported catalogue")
    fields: dict[str, str] = {}
    for tok in tokens[3:]:
        key, sep, value = tok.partition("=")
        if not sep or key not in ("inputs", "params", "out", "weight_bytes") or key in fields:
            raise MalformedDocument(f"line {lineno}: unexpected token {tok!r}")
        fields[key] = value
    if "inputs" not in fields:
        raise MalformedDocument(f"line {lineno}: missing inputs=")
    refs = tuple(_ident(r, f"line {lineno}") for r in fields["inputs"].split(",") if r)
    raw_params: dict[str, int] = {}
    for item in filter(None, fields.get("params", "").split(",")):
        key, sep, value = item.partition("=")
        if not sep or key in raw_params:
            raise MalformedDocument(f"line {lineno}: bad param {item!r}")
        raw_params[key] = _int(value, f"line {lineno} param {key}")
    params = normalize_params(kind, raw_params)

    out_shape = TensorShape.parse(fields["out"]) if "out" in fields else None
    weight_bytes = _int(fields["weight_bytes"], f"line {lineno}") if "weight_bytes" in fields else None
    if out_shape is None or weight_bytes is None:
        # defaults come from forward propagation, which needs resolvable inputs
        if not all(r in shapes for r in refs):
            raise MalformedDocument(f"line {lineno}: cannot infer defaults, inputs unresolved")
        ins = [shapes[r] for r in refs]
        if out_shape is None:
            out_shape = TensorShape((batch_dim,) + infer_sample_dims(kind, params, ins))
        if weight_bytes is None:
            weight_bytes = expected_weight_bytes(kind, params, ins)
    if weight_bytes < 0:
        raise MalformedDocument(f"line {lineno}: negative weight_bytes")
    shapes[name] = out_shape.sample_dims
    return LayerSpec(name, kind, params, refs, out_shape, weight_bytes)


def parse_manifest(text: str) -> ModelManifest:
    """Parse and fully validate a manifest document."""
    if not isinstance(text, str):
        raise MalformedDocument("manifest must be text")
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise MalformedDocument(f"first line must be {HEADER!r}")
    meta: dict[str, str] = {}
    layers: list[LayerSpec] = []
    shapes: dict[str, tuple[int, ...]] = {}
    input_shape: TensorShape | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        if key == "layer":
            if input_shape is None:
                raise MalformedDocument(f"line {lineno}: 'input' must precede layers")
            layers.append(_parse_layer(tokens, lineno, shapes, input_shape.dims[0]))
            continue
        if len(tokens) != 2:
            raise MalformedDocument(f"line {lineno}: expected '<key> <value>'")
        if key not in ("model_name", "version", "input", "weight_seed", "total_weight_bytes", "footprint_bytes"):
            raise MalformedDocument(f"line {lineno}: unknown key {key!r}")
        if key in meta:
            raise MalformedDocument(f"line {lineno}: duplicate key {key!r}")
        if layers:
            raise MalformedDocument(f"line {lineno}: metadata must precede layers")
        meta[key] = tokens[1]
        if key == "input":
            input_shape = TensorShape.parse(tokens[1])
            shapes["input"] = input_shape.sample_dims
    if "model_name" not in meta or input_shape is None:
        raise MalformedDocument("model_name and input are required")
    layer_sum = sum(layer.weight_bytes for layer in layers)
    total = _int(meta["total_weight_bytes"], "total_weight_bytes") if "total_weight_bytes" in meta else layer_sum
    footprint = _int(meta["footprint_bytes"], "footprint_bytes") if "footprint_bytes" in meta else total
    seed = _int(meta.get("weight_seed", "0"), "weight_seed")
    if not 0 <= seed < 2**64:
        raise MalformedDocument("weight_seed must be a 64-bit unsigned integer")
    manifest = ModelManifest(
        model_name=_ident(meta["model_name"], "model_name"),
        version=_int(meta.get("version", "1"), "version"),
        input_shape=input_shape,
        layers=tuple(layers),
        total_weight_bytes=total,
        declared_footprint_bytes=footprint,
        weight_seed=seed,
    )
    raise_for_findings(validate_manifest(manifest))
    return manifest


def load_manifest(path) -> ModelManifest:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def bundled_manifest_text(name: str) -> str:
    return resources.files("infershare.data.manifests").joinpath(f"{name}.manifest").read_text("utf-8")


def bundled_manifest(name: str) -> ModelManifest:
    return parse_manifest(bundled_manifest_text(name))


def bundled_manifest_names() -> list[str]:
    root = resources.files("infershare.data.manifests")
    return sorted(p.name[: -len(".manifest")] for p in root.iterdir() if p.name.endswith(".manifest"))
