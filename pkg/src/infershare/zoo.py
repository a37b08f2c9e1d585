"""Builders for the bundled manifests (golden files live in data/manifests)."""
from __future__ import annotations

from .manifest import INPUT_REF, ModelManifest, TensorShape, build_manifest, chain

RESNET18_FOOTPRINT_BYTES = 78_000_000
RESNET18_RESOLUTION = 160


def resnet18(resolution: int = RESNET18_RESOLUTION, classes: int = 1000, weight_seed: int = 18) -> ModelManifest:
    """ResNet-18 topology with batch-norm folded into conv biases.

    Channel widths, kernels, strides and block structure follow the published
    network; only the input resolution is a parameter.
    """
    layers: list[tuple] = []

    def conv(name, src, cout, k, stride=1, pad=0):
        layers.append((name, "conv2d", [src], {
            "out_channels": cout, "kernel_h": k, "kernel_w": k, "stride": stride, "pad": pad,
        }))
        return name

    def relu(name, src):
        layers.append((name, "relu", [src], {}))
        return name

    x = relu("stem_relu", conv("stem_conv", INPUT_REF, 64, 7, stride=2, pad=3))
    layers.append(("stem_pool", "maxpool2d", [x], {"kernel": 3, "stride": 2, "pad": 1}))
    x = "stem_pool"
    cin = 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            p = f"s{stage}b{block}"
            stride = 2 if (block == 0 and stage > 1) else 1
            y = relu(f"{p}_relu1", conv(f"{p}_conv1", x, cout, 3, stride, 1))
            y = conv(f"{p}_conv2", y, cout, 3, 1, 1)
            shortcut = x
            if stride != 1 or cin != cout:
                shortcut = conv(f"{p}_down", x, cout, 1, stride, 0)
            layers.append((f"{p}_add", "add", [y, shortcut], {}))
            x = relu(f"{p}_relu2", f"{p}_add")
            cin = cout
    layers.append(("gap", "globalavgpool", [x], {}))
    layers.append(("flat", "flatten", ["gap"], {}))
    layers.append(("fc", "dense", ["flat"], {"units": classes}))
    layers.append(("prob", "softmax", ["fc"], {}))
    return build_manifest(
        "resnet18",
        TensorShape.of(None, 3, resolution, resolution),
        layers,
        footprint_bytes=RESNET18_FOOTPRINT_BYTES,
        weight_seed=weight_seed,
    )


def dense1000(weight_seed: int = 1) -> ModelManifest:
    return chain("dense1000", TensorShape.of(1, 1000), ("dense", {"units": 1000}), weight_seed=weight_seed)


def mlp_small(weight_seed: int = 7, footprint_bytes: int = 10_000_000) -> ModelManifest:
    """Small classifier used for multi-tenant churn scenarios (10 MB declared footprint)."""
    return chain(
        "mlp_small",
        TensorShape.of(None, 256),
        ("dense", {"units": 512}),
        ("relu", {}),
        ("dense", {"units": 128}),
        ("relu", {}),
        ("dense", {"units": 10}),
        ("softmax", {}),
        footprint_bytes=footprint_bytes,
        weight_seed=weight_seed,
    )


def cnn_tiny(weight_seed: int = 3) -> ModelManifest:
    return chain(
        "cnn_tiny",
        TensorShape.of(None, 1, 8, 8),
        ("conv2d", {"out_channels": 4, "kernel_h": 3, "kernel_w": 3, "pad": 1}),
        ("relu", {}),
        ("maxpool2d", {"kernel": 2}),
        ("globalavgpool", {}),
        ("flatten", {}),
        ("dense", {"units": 3}),
        ("softmax", {}),
        weight_seed=weight_seed,
    )


BUILDERS = {
    "resnet18": resnet18,
    "dense1000": dense1000,
    "mlp_small": mlp_small,
    "cnn_tiny": cnn_tiny,
}
