#!/usr/bin/env python3
"""Compare the compiled kernels with the numpy fallback.

Usage:
  python benchmarks/bench_kernels.py [--repeat N] [--model NAME ...]

Times each layer kernel on fixed shapes and whole-model forward passes on
the bundled manifests, once per backend, and prints the speedup. Outputs are
checked for equality before anything is timed.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from infershare import executor
from infershare.executor import _fallback, execute_model, generate_weights, random_input
from infershare.manifest import bundled_manifest

try:
    from infershare.executor import _kernels
except ImportError:
    _kernels = None


def kernel_cases(rng):
    x = rng.standard_normal((4, 16, 32, 32))
    w = rng.standard_normal((32, 16, 3, 3))
    b = rng.standard_normal(32)
    d = rng.standard_normal((64, 512))
    dw = rng.standard_normal((256, 512))
    flat = x.reshape(-1)
    db = rng.standard_normal(256)
    return {
        "conv2d 4x16x32x32 k3": lambda k: k.conv2d(x, w, b, 1, 1),
        "dense 64x512->256": lambda k: k.dense(d, dw, db),
        "maxpool2d k3 s2": lambda k: k.maxpool2d(x, 3, 2, 1),
        "globalavgpool": lambda k: k.globalavgpool(x),
        "relu": lambda k: k.relu(flat),
        "add": lambda k: k.add(flat, flat),
        "softmax 64x512": lambda k: k.softmax(d),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def model_time(name, backend, repeat):
    m = bundled_manifest(name)
    w = generate_weights(m)
    x = random_input(m, 1, seed=0)
    saved = executor.kernels
    executor.kernels = backend
    try:
        return best_of(lambda: execute_model(m, w, x), repeat)
    finally:
        executor.kernels = saved


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--model", action="append", help="bundled manifest (default: mlp_small, cnn_tiny, resnet18)")
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    print(f"{'case':28s} {'cython ms':>11s} {'python ms':>11s} {'speedup':>8s}")
    for label, call in kernel_cases(rng).items():
        (fast, fast_ops), (slow, slow_ops) = call(_kernels), call(_fallback)
        assert fast_ops == slow_ops, label
        np.testing.assert_allclose(fast, slow, rtol=4 * np.finfo(float).eps, atol=0)
        tc = best_of(lambda: call(_kernels), args.repeat) * 1e3
        tp = best_of(lambda: call(_fallback), args.repeat) * 1e3
        print(f"{label:28s} {tc:11.3f} {tp:11.3f} {tp / tc:7.2f}x")

    for name in args.model or ["mlp_small", "cnn_tiny", "resnet18"]:
        repeat = 1 if name == "resnet18" else args.repeat
        tc = model_time(name, _kernels, repeat) * 1e3
        tp = model_time(name, _fallback, repeat) * 1e3
        print(f"{'model ' + name:28s} {tc:11.3f} {tp:11.3f} {tp / tc:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
