from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infershare.errors import CyclicGraph, MalformedDocument, ShapeMismatch, UnknownLayerKind, WeightByteMismatch
from infershare.manifest import (
    TensorShape,
    build_manifest,
    bundled_manifest,
    bundled_manifest_names,
    chain,
    layer_flops,
    model_flops,
    parse_manifest,
    serialize_manifest,
    validate_manifest,
)


def dense1000():
    return chain("d", TensorShape.of(1, 1000), ("dense", {"units": 1000}))


def test_single_dense_weight_bytes():
    m = dense1000()
    assert len(m.layers) == 1
    assert m.total_weight_bytes == (1000 * 1000 + 1000) * 4 == 4_004_000


def test_unknown_kind_rejected_at_parse():
    text = serialize_manifest(dense1000()).replace(" dense ", " custom_op ")
    with pytest.raises(UnknownLayerKind):
        parse_manifest(text)


def test_bundled_resnet18_flops_near_two_billion():
    flops = model_flops(bundled_manifest("resnet18"), 1)
    assert 1.8e9 <= flops <= 2.2e9
    assert abs(flops - 2e9) <= 0.1 * 2e9


def test_layer_flops_dense_and_relu():
    m = chain("x", TensorShape.of(1, 1000), ("dense", {"units": 1000}), ("relu", {}))
    d, r = m.layers
    assert layer_flops(d, [m.input_shape], 1) == 2_000_000
    assert layer_flops(r, [m.shape_of("l0")], 1) == 1000


def test_layer_flops_conv_hand_value():
    m = chain("c", TensorShape.of(1, 64, 56, 56),
              ("conv2d", {"out_channels": 64, "kernel_h": 3, "kernel_w": 3, "pad": 1}))
    assert layer_flops(m.layers[0], [m.input_shape], 1) == 231_211_008


def test_empty_manifest_has_zero_flops():
    m = build_manifest("empty", TensorShape.of(None, 4), [])
    assert model_flops(m, 1) == 0


def test_flops_linear_in_batch():
    m = bundled_manifest("cnn_tiny")
    assert model_flops(m, 7) == 7 * model_flops(m, 1)
    with pytest.raises(ShapeMismatch):
        model_flops(m, 0)


def test_validate_consistent_manifest_is_clean():
    for name in bundled_manifest_names():
        assert validate_manifest(bundled_manifest(name)).findings == []


def test_validate_reports_shape_mismatch():
    m = dense1000()
    bad = replace(m.layers[0], output_shape=TensorShape.of(1, 999))
    report = validate_manifest(replace(m, layers=(bad,)))
    assert "ShapeMismatch" in report.codes()


def test_validate_reports_weight_byte_mismatch():
    m = dense1000()
    report = validate_manifest(replace(m, total_weight_bytes=m.total_weight_bytes + 4))
    assert "WeightByteMismatch" in report.codes()


def test_parse_raises_with_all_findings():
    m = dense1000()
    text = serialize_manifest(m).replace("total_weight_bytes 4004000", "total_weight_bytes 4004004")
    with pytest.raises(WeightByteMismatch) as info:
        parse_manifest(text)
    assert info.value.findings


def test_malformed_header():
    with pytest.raises(MalformedDocument):
        parse_manifest("not a manifest\n")


def test_serialize_round_trip_bundled():
    for name in bundled_manifest_names():
        m = bundled_manifest(name)
        assert parse_manifest(serialize_manifest(m)) == m


def test_cycle_rejected():
    text = serialize_manifest(chain("f", TensorShape.of(None, 4), ("relu", {}), ("relu", {})))
    text = text.replace("inputs=input", "inputs=l1")
    with pytest.raises(CyclicGraph):
        parse_manifest(text)


@settings(max_examples=60, deadline=None)
@given(
    units=st.lists(st.integers(1, 40), min_size=1, max_size=4),
    fan_in=st.integers(1, 40),
    seed=st.integers(0, 2**64 - 1),
)
def test_round_trip_random_mlps(units, fan_in, seed):
    steps = []
    for u in units:
        steps += [("dense", {"units": u}), ("relu", {})]
    m = chain("mlp", TensorShape.of(None, fan_in), *steps, ("softmax", {}), weight_seed=seed)
    assert parse_manifest(serialize_manifest(m)) == m
    expected = 0
    prev = fan_in
    for u in units:
        expected += 2 * prev * u + u
        prev = u
    expected += 5 * prev
    assert model_flops(m, 1) == expected


def test_tensor_shape_parse():
    assert TensorShape.parse("*x3x4").dims == (None, 3, 4)
    assert TensorShape.parse("2x5").element_count() == 10
    with pytest.raises(ShapeMismatch):
        TensorShape.parse("2x5").resolve(3)
