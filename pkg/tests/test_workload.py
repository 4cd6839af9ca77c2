import json

import numpy as np
import pytest

from npudse.funcsim import execute_graph
from npudse.workload import (
    ModelError,
    OperatorSpec,
    fuse_operators,
    lower_graph,
    lower_to_nest,
    parse_model,
    serialize_model,
)


def doc(tensors, ops):
    return json.dumps({"version": 1, "tensors": tensors, "operators": ops})


def test_single_matmul():
    g = parse_model(doc({"a": [2, 2], "b": [2, 2], "c": [2, 2]},
                        [{"name": "mm", "kind": "matmul", "inputs": ["a", "b"], "outputs": ["c"]}]))
    assert len(g.nodes) == 1 and len(g.tensors) == 3


def test_conv_shape_rule():
    g = parse_model(doc({"x": [1, 1, 5, 5], "w": [1, 1, 3, 3], "y": [1, 1, 3, 3]},
                        [{"name": "cv", "kind": "conv2d", "inputs": ["x", "w"], "outputs": ["y"]}]))
    nest = lower_graph(g)[0]
    assert nest.bounds["Y"] == 3 and nest.bounds["X"] == 3 and nest.bounds["R"] == 3 and nest.bounds["S"] == 3
    with pytest.raises(ModelError, match="cv"):
        parse_model(doc({"x": [1, 1, 5, 5], "w": [1, 1, 3, 3], "y": [1, 1, 4, 4]},
                        [{"name": "cv", "kind": "conv2d", "inputs": ["x", "w"], "outputs": ["y"]}]))


def test_undeclared_tensor_names_node():
    with pytest.raises(ModelError) as e:
        parse_model(doc({"a": [2, 2], "c": [2, 2]},
                        [{"name": "mm", "kind": "matmul", "inputs": ["a", "ghost"], "outputs": ["c"]}]))
    assert e.value.node == "mm" and "shape mismatch" in str(e.value)


def test_malformed_and_unknown_kind():
    with pytest.raises(ModelError, match="malformed"):
        parse_model("{not json")
    with pytest.raises(ModelError, match="unknown operator kind"):
        parse_model(doc({"a": [2]}, [{"name": "z", "kind": "softmax", "inputs": ["a"], "outputs": ["a"]}]))


def test_cycle_rejected():
    with pytest.raises(ModelError, match="cycle"):
        parse_model(doc({"a": [2, 2], "b": [2, 2]}, [
            {"name": "r1", "kind": "elementwise", "attributes": {"op": "relu"}, "inputs": ["b"], "outputs": ["a"]},
            {"name": "r2", "kind": "elementwise", "attributes": {"op": "relu"}, "inputs": ["a"], "outputs": ["b"]},
        ]))


CONV_RELU = doc({"x": [1, 2, 4, 4], "w": [3, 2, 3, 3], "y": [1, 3, 2, 2], "z": [1, 3, 2, 2]}, [
    {"name": "cv", "kind": "conv2d", "inputs": ["x", "w"], "outputs": ["y"]},
    {"name": "act", "kind": "elementwise", "attributes": {"op": "relu"}, "inputs": ["y"], "outputs": ["z"]},
])


def test_conv_relu_fuses():
    g = fuse_operators(parse_model(CONV_RELU))
    assert len(g.nodes) == 1
    assert g.nodes[0].epilogue == ({"op": "relu", "operand": None},)


def test_multi_consumer_not_fused():
    g = parse_model(doc({"x": [1, 2, 4, 4], "w": [2, 2, 1, 1], "y": [1, 2, 4, 4], "z": [1, 2, 4, 4], "u": [1, 2, 4, 4]}, [
        {"name": "c1", "kind": "conv2d", "inputs": ["x", "w"], "outputs": ["y"]},
        {"name": "act", "kind": "elementwise", "attributes": {"op": "relu"}, "inputs": ["y"], "outputs": ["z"]},
        {"name": "c2", "kind": "conv2d", "inputs": ["y", "w"], "outputs": ["u"]},
    ]))
    assert fuse_operators(g) == g


MM_ADD_RELU = doc({"a": [3, 4], "b": [4, 2], "bias": [3, 2], "c": [3, 2], "d": [3, 2], "e": [3, 2]}, [
    {"name": "mm", "kind": "matmul", "inputs": ["a", "b"], "outputs": ["c"]},
    {"name": "add", "kind": "elementwise", "attributes": {"op": "add"}, "inputs": ["c", "bias"], "outputs": ["d"]},
    {"name": "act", "kind": "elementwise", "attributes": {"op": "relu"}, "inputs": ["d"], "outputs": ["e"]},
])


def test_matmul_add_relu_chain_is_semantics_preserving():
    g = parse_model(MM_ADD_RELU)
    f = fuse_operators(g)
    assert [e["op"] for e in f.nodes[0].epilogue] == ["add", "relu"]
    rng = np.random.default_rng(0)
    feeds = {"a": rng.integers(-5, 5, (3, 4)), "b": rng.integers(-5, 5, (4, 2)), "bias": rng.integers(-9, 9, (3, 2))}
    assert np.array_equal(execute_graph(g, feeds)["e"], execute_graph(f, feeds)["e"])


def test_lower_matmul():
    n = lower_to_nest(OperatorSpec("m", "matmul", {"M": 2, "N": 2, "K": 2}, ("a", "b"), ("c",)))
    assert n.dims == (("M", 2), ("N", 2), ("K", 2)) and n.reduction == {"K"}
    assert n.macs == 8


def test_lower_conv_degenerate_and_patterns():
    attrs = dict(zip("NKCYXRS", [1] * 7))
    n = lower_to_nest(OperatorSpec("c", "conv2d", attrs, ("x", "w"), ("y",)))
    assert len(n.dims) == 7 and all(b == 1 for _, b in n.dims)
    assert [str(e) for e in n.operands["input"]] == ["N", "C", "Y+R", "X+S"]
    assert [str(e) for e in n.operands["weight"]] == ["K", "C", "R", "S"]
    assert [str(e) for e in n.operands["output"]] == ["N", "K", "Y", "X"]
    for e in n.operands["output"]:
        assert not set(e.dims) & n.reduction


def test_lower_unsupported():
    with pytest.raises(ModelError):
        lower_to_nest(OperatorSpec("p", "pooling", {}, ("x",), ("y",)))


def test_macs_equal_dim_product():
    g = parse_model(CONV_RELU)
    nest = lower_graph(g)[0]
    # 1 image, 3 filters, 2 channels, 2x2 outputs, 3x3 kernel
    assert nest.macs == 1 * 3 * 2 * 2 * 2 * 3 * 3


def test_roundtrip():
    for text in (CONV_RELU, MM_ADD_RELU):
        g = parse_model(text)
        assert parse_model(serialize_model(g)) == g
        assert serialize_model(parse_model(serialize_model(g))) == serialize_model(g)
