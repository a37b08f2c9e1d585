"""CPU reference interpreter for the layer catalogue.

The compiled kernels are used when the extension is built; otherwise, or
when ``INFERSHARE_PURE_PYTHON=1`` is set, the numpy fallback is selected at
import time. ``BACKEND`` names the active one.
"""
from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import NonFiniteOutput, ShapeMismatch
from ..manifest import (
    BYTES_PER_WEIGHT,
    INPUT_REF,
    LayerSpec,
    ModelManifest,
    TensorShape,
    infer_sample_dims,
)
from . import _fallback

if os.environ.get("INFERSHARE_PURE_PYTHON") == "1":
    kernels = _fallback
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:  # extension not built
        kernels = _fallback

BACKEND: str = kernels.NAME


@dataclass(frozen=True, eq=False)
class Tensor:
    """Fixed-shape tensor; ``values`` is the flat row-major float64 buffer."""

    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ShapeMismatch(f"{values.size} values do not fill shape {self.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, array) -> "Tensor":
        array = np.asarray(array, dtype=np.float64)
        return cls(array.shape, array)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    @property
    def batch(self) -> int:
        return self.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))


@dataclass
class WeightStore:
    """Per-layer (weight, bias) arrays generated from the manifest's seed."""

    generated_from: int
    tensors: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def total_bytes(self) -> int:
        return BYTES_PER_WEIGHT * sum(w.size + b.size for w, b in self.tensors.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore) or self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.array_equal(w, other.tensors[k][0]) and np.array_equal(b, other.tensors[k][1])
            for k, (w, b) in self.tensors.items()
        )


def layer_stream(weight_seed: int, layer_name: str) -> np.random.Generator:
    """PCG64 stream keyed by (seed, layer name); parameter i is the i-th draw."""
    digest = hashlib.sha256(layer_name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    entropy = [weight_seed & 0xFFFFFFFF, (weight_seed >> 32) & 0xFFFFFFFF, *words]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _weight_shapes(manifest: ModelManifest, layer: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    src = manifest.shape_of(layer.input_refs[0]).sample_dims
    if layer.kind == "dense":
        return (layer.params["units"], src[0]), (layer.params["units"],)
    if layer.kind == "conv2d":
        p = layer.params
        return (p["out_channels"], src[0], p["kernel_h"], p["kernel_w"]), (p["out_channels"],)
    return None


def generate_weights(manifest: ModelManifest) -> WeightStore:
    """Uniform weights in [-0.5, 0.5): weight tensor elements first, then bias."""
    store = WeightStore(generated_from=manifest.weight_seed)
    for layer in manifest.layers:
        shapes = _weight_shapes(manifest, layer)
        if shapes is None:
            continue
        wshape, bshape = shapes
        n_w = int(np.prod(wshape))
        draws = layer_stream(manifest.weight_seed, layer.name).random(n_w + bshape[0]) - 0.5
        store.tensors[layer.name] = (draws[:n_w].reshape(wshape), draws[n_w:].copy())
    return store


def _check_finite(layer: LayerSpec, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput(f"layer {layer.name} produced non-finite values")
    if layer.kind == "softmax" and (out.min() < 0.0 or out.max() > 1.0):
        raise NonFiniteOutput(f"softmax {layer.name} left [0, 1]")


def execute_layer_counted(
    layer: LayerSpec, inputs: Sequence[Tensor], weights: WeightStore | None
) -> tuple[Tensor, int]:
    """Run one layer; also return the number of arithmetic ops performed."""
    if not inputs:
        raise ShapeMismatch(f"{layer.name}: no inputs")
    batch = inputs[0].batch
    if any(t.batch != batch for t in inputs):
        raise ShapeMismatch(f"{layer.name}: inputs disagree on batch size")
    out_dims = infer_sample_dims(layer.kind, layer.params, [t.shape[1:] for t in inputs])
    if out_dims != layer.output_shape.sample_dims:
        raise ShapeMismatch(f"{layer.name}: inputs imply {out_dims}, layer declares {layer.output_shape}")
    if layer.output_shape.dims[0] is not None and layer.output_shape.dims[0] != batch:
        raise ShapeMismatch(f"{layer.name}: fixed batch {layer.output_shape.dims[0]}, got {batch}")

    x = inputs[0].array
    kind = layer.kind
    p = layer.params
    if kind == "conv2d":
        w, b = weights[layer.name]
        if w.shape[1] != x.shape[1]:
            raise ShapeMismatch(f"{layer.name}: weight expects {w.shape[1]} channels")
        out, ops = kernels.conv2d(np.ascontiguousarray(x), w, b, p["stride"], p["pad"])
    elif kind == "dense":
        w, b = weights[layer.name]
        if w.shape[1] != x.shape[1]:
            raise ShapeMismatch(f"{layer.name}: weight expects fan-in {w.shape[1]}")
        out, ops = kernels.dense(np.ascontiguousarray(x), w, b)
    elif kind == "maxpool2d":
        out, ops = kernels.maxpool2d(np.ascontiguousarray(x), p["kernel"], p["stride"], p["pad"])
    elif kind == "globalavgpool":
        out, ops = kernels.globalavgpool(np.ascontiguousarray(x))
    elif kind == "relu":
        out, ops = kernels.relu(inputs[0].values)
    elif kind == "add":
        out, ops = kernels.add(inputs[0].values, inputs[1].values)
    elif kind == "softmax":
        rows = x.reshape(-1, x.shape[-1])
        out, ops = kernels.softmax(np.ascontiguousarray(rows))
    elif kind == "flatten":
        out, ops = x.reshape(batch, -1).copy(), 0
    else:  # pragma: no cover - catalogue is closed
        raise ShapeMismatch(f"unsupported kind {kind}")
    out = np.asarray(out).reshape((batch,) + out_dims)
    _check_finite(layer, out)
    return Tensor((batch,) + out_dims, out), int(ops)


def execute_layer(layer: LayerSpec, inputs: Sequence[Tensor], weights: WeightStore | None) -> Tensor:
    return execute_layer_counted(layer, inputs, weights)[0]


def _check_input(manifest: ModelManifest, input: Tensor) -> None:
    try:
        manifest.input_shape.resolve(input.batch)
    except ShapeMismatch:
        raise
    if input.shape[1:] != manifest.input_shape.sample_dims:
        raise ShapeMismatch(f"input shape {input.shape} does not match {manifest.input_shape}")


def execute_model_counted(
    manifest: ModelManifest, weights: WeightStore, input: Tensor
) -> tuple[Tensor, dict[str, int]]:
    _check_input(manifest, input)
    values: dict[str, Tensor] = {INPUT_REF: input}
    counts: dict[str, int] = {}
    remaining = {}
    for layer in manifest.layers:
        for ref in layer.input_refs:
            remaining[ref] = remaining.get(ref, 0) + 1
    for layer in manifest.layers:
        out, ops = execute_layer_counted(layer, [values[r] for r in layer.input_refs], weights)
        values[layer.name] = out
        counts[layer.name] = ops
        for ref in layer.input_refs:  # free intermediates once consumed
            remaining[ref] -= 1
            if remaining[ref] == 0 and ref != INPUT_REF:
                del values[ref]
    return values[manifest.output_ref], counts


def execute_model(manifest: ModelManifest, weights: WeightStore, input: Tensor) -> Tensor:
    """Evaluate the layer DAG in declaration (topological) order."""
    return execute_model_counted(manifest, weights, input)[0]


def random_input(manifest: ModelManifest, batch: int = 1, seed: int = 0) -> Tensor:
    shape = manifest.input_shape.resolve(batch)
    rng = np.random.default_rng(seed)
    return Tensor(shape, rng.random(int(np.prod(shape))))


# CSV: one row per batch item, the sample flattened row-major


def read_tensor_csv(text: str, sample_shape: TensorShape | Sequence[int]) -> Tensor:
    dims = sample_shape.sample_dims if isinstance(sample_shape, TensorShape) else tuple(sample_shape)
    rows = [[float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row]
    if not rows:
        raise ShapeMismatch("input CSV has no rows")
    return Tensor((len(rows),) + dims, np.array(rows, dtype=np.float64))


def write_tensor_csv(tensor: Tensor) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in tensor.array.reshape(tensor.batch, -1):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


__all__ = [
    "BACKEND",
    "Tensor",
    "WeightStore",
    "execute_layer",
    "execute_layer_counted",
    "execute_model",
    "execute_model_counted",
    "generate_weights",
    "layer_stream",
    "random_input",
    "read_tensor_csv",
    "write_tensor_csv",
]
