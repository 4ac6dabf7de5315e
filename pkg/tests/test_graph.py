import math

import numpy as np
import pytest

from qnet import builders
from qnet.errors import ConfigError, CoverageError, DimensionError, StructureError
from qnet.graph import (Graph, forward, infer_shapes, layer_flops, param_shapes,
                        parameter_count, stats)

from conftest import L, chain, small_net


@pytest.fixture(scope="module")
def nets():
    return {"resnet50": builders.build_resnet50(3),
            "mobilenetv1": builders.build_mobilenet_v1(1.0, 224, 3),
            "mobilenetv2": builders.build_mobilenet_v2(1.0, 224, 3)}


def test_all_shapes_positive(nets):
    for g in nets.values():
        shapes = infer_shapes(g)
        assert all(d > 0 for s in shapes.values() for d in s)
        assert shapes[g.output.name] == (3,)


def test_mobilenet_v1_structure(nets):
    g = nets["mobilenetv1"]
    assert sum(l.kind == "depthwise" for l in g) == 13
    assert infer_shapes(g)["conv1"] == (112, 112, 32)
    for i in range(1, 14):
        kinds = [g[f"block{i}_{s}"].kind for s in ("dw", "dw_bn", "dw_relu6", "pw", "pw_bn", "pw_relu6")]
        assert kinds == ["depthwise", "batchnorm", "activation", "conv2d", "batchnorm", "activation"]


def test_mobilenet_v2_residuals(nets):
    g = nets["mobilenetv2"]
    shapes = infer_shapes(g)
    adds = [l for l in g if l.kind == "add"]
    assert len(adds) == 10
    for a in adds:
        block = a.name[:-len("_add")]
        assert g[f"{block}_dw"].attrs["stride"] == 1
        assert shapes[a.inputs[0]] == shapes[a.inputs[1]]
    # every stride-1 block with equal in/out channels has an add
    n_blocks = sum(1 for l in g if l.kind == "depthwise")
    assert n_blocks == 17
    assert shapes["conv_last"][-1] == 1280


def test_resnet_output_shape(nets):
    g = nets["resnet50"]
    w = builders.init_weights(g, 0)
    y = forward(g, w, np.zeros((1, 224, 224, 3), np.float32))
    assert y.shape == (1, 3)
    np.testing.assert_allclose(y.sum(), 1.0, rtol=1e-6)


def test_heads_recorded_in_metadata(nets):
    assert nets["resnet50"].metadata["head"] == {"hidden_units": 256, "dropout": 0.5}
    assert nets["mobilenetv1"]["head_dropout"].attrs["rate"] == 0.25
    assert "head_dense" not in nets["mobilenetv2"]


def test_builder_config_errors():
    with pytest.raises(ConfigError):
        builders.build_mobilenet_v1(1.5, 224, 3)
    with pytest.raises(ConfigError):
        builders.build_mobilenet_v1(1.0, 100, 3)
    with pytest.raises(ConfigError):
        builders.build_resnet50(1)


def test_width_multiplier_shrinks_channels():
    g = builders.build_mobilenet_v1(0.25, 128, 3)
    assert infer_shapes(g)["block13_pw"][-1] == 256
    assert builders.round_channels(32 * 0.35) == 16


def test_paper_scale_stats(nets):
    r, m1 = stats(nets["resnet50"]), stats(nets["mobilenetv1"])
    assert 3.2e9 <= r.flops <= 4.8e9
    assert 6 <= r.flops / m1.flops <= 12
    assert m1.bytes < r.bytes / 5


def test_parameter_count_two_paths(nets):
    for g in nets.values():
        w = builders.init_weights(g, 0)
        assert parameter_count(g) == sum(a.size for p in w.values() for a in p.values())


def test_dense_stats():
    g = chain([("input", "input", {"shape": [3]}), ("d", "dense", {"units": 3, "use_bias": True})])
    st = stats(g)
    assert st.parameter_count == 12
    # one multiply-add counts as one operation, plus one op per bias add
    assert layer_flops(g)["d"] == 9 + 3
    assert st.bytes > 12 * 4


def test_hand_computed_graph():
    g = chain([("input", "input", {"shape": [2, 2, 1]}),
               ("c", "conv2d", {"filters": 2, "kernel": [1, 1], "stride": 1, "padding": "same",
                                "use_bias": True}),
               ("gap", "pool", {"fn": "global_avg"}),
               ("sm", "activation", {"fn": "softmax"})])
    w = {"c": {"kernel": np.array([[[[1.0, -1.0]]]], np.float32), "bias": np.array([0.0, 1.0], np.float32)}}
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 2, 2, 1)
    # channel means: 2.5 and -2.5 + 1 = -1.5
    e = np.exp([2.5, -1.5])
    np.testing.assert_allclose(forward(g, w, x), [e / e.sum()], rtol=1e-6)


def test_topological_order_independent_of_storage(toy, rng):
    g, w = toy
    x = rng.uniform(-1, 1, (2, 8, 8, 3)).astype(np.float32)
    ref = forward(g, w, x)
    layers = list(g)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(len(layers))
        g2 = Graph([layers[i] for i in perm], g.metadata)
        np.testing.assert_array_equal(forward(g2, w, x), ref)


def test_forward_deterministic(rng):
    g = small_net(dropout=0.5)
    w = builders.init_weights(g, 3)
    x = rng.uniform(-1, 1, (4, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(forward(g, w, x), forward(g, w, x))
    a = forward(g, w, x, mode="train", rng=np.random.default_rng(7))
    b = forward(g, w, x, mode="train", rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward(g, w, x))


def test_graph_validation():
    inp = L("input", "input", shape=[4])
    with pytest.raises(StructureError):
        Graph([inp, L("a", "dense", ["b"], units=2), L("b", "dense", ["a"], units=2)])
    with pytest.raises(StructureError):
        Graph([inp, L("a", "dense", ["missing"], units=2)])
    with pytest.raises(StructureError):
        Graph([inp, L("input", "dense", ["input"], units=2)])


def test_forward_errors(toy):
    g, w = toy
    with pytest.raises(DimensionError, match="input"):
        forward(g, w, np.zeros((1, 9, 9, 3), np.float32))
    w2 = dict(w)
    del w2["pw"]
    with pytest.raises(CoverageError, match="pw"):
        forward(g, w2, np.zeros((1, 8, 8, 3), np.float32))


def test_json_round_trip(toy):
    g, _ = toy
    g2 = Graph.from_json(g.to_json())
    assert [l.name for l in g2] == [l.name for l in g]
    assert param_shapes(g2) == param_shapes(g)
    assert g2.metadata == g.metadata


def test_init_weights_deterministic():
    g = small_net()
    a, b = builders.init_weights(g, 5), builders.init_weights(g, 5)
    for name in a:
        for p in a[name]:
            np.testing.assert_array_equal(a[name][p], b[name][p])
    k = a["c1"]["kernel"]
    assert np.abs(k).max() <= math.sqrt(6 / 27)
