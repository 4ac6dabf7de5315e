import numpy as np
import pytest

from qnet.builders import init_weights
from qnet.graph import Graph, LayerSpec
from qnet.runtime import tune_allocator

tune_allocator()


def L(name, kind, inputs=None, **attrs):
    return LayerSpec(name, kind, tuple(inputs) if inputs is not None else (), attrs)


def chain(specs, metadata=None):
    """Wire (name, kind, attrs) tuples into a linear graph."""
    layers, prev = [], None
    for name, kind, attrs in specs:
        layers.append(L(name, kind, [prev] if prev else [], **attrs))
        prev = name
    return Graph(layers, metadata or {})


def small_net(res=8, channels=3, classes=3, bn=True, dropout=0.0):
    """conv -> (bn) -> relu -> depthwise -> (bn) -> relu6 -> 1x1 conv -> (bn) -> gap -> dense."""
    specs = [("input", "input", {"shape": [res, res, channels]}),
             ("c1", "conv2d", {"filters": 4, "kernel": [3, 3], "stride": 1, "padding": "same",
                               "use_bias": not bn})]
    if bn:
        specs.append(("c1_bn", "batchnorm", {"epsilon": 1e-3}))
    specs += [("c1_relu", "activation", {"fn": "relu"}),
              ("dw", "depthwise", {"kernel": [3, 3], "stride": 2, "padding": "same",
                                   "use_bias": not bn})]
    if bn:
        specs.append(("dw_bn", "batchnorm", {"epsilon": 1e-3}))
    specs += [("dw_relu6", "activation", {"fn": "relu6"}),
              ("pw", "conv2d", {"filters": 6, "kernel": [1, 1], "stride": 1, "padding": "same",
                                "use_bias": not bn})]
    if bn:
        specs.append(("pw_bn", "batchnorm", {"epsilon": 1e-3}))
    specs += [("gap", "pool", {"fn": "global_avg"})]
    if dropout:
        specs.append(("drop", "dropout", {"rate": dropout}))
    specs += [("logits", "dense", {"units": classes, "use_bias": True}),
              ("probs", "activation", {"fn": "softmax"})]
    return chain(specs, {"architecture": "toy", "num_classes": classes,
                         "preprocess": "mobilenet_unit_range"})


def randomize_bn(graph, weights, rng):
    """Give every batchnorm layer non-trivial statistics."""
    for layer in graph:
        if layer.kind == "batchnorm":
            p = weights[layer.name]
            c = p["gamma"].shape
            p["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            p["beta"] = rng.normal(0, 0.3, c).astype(np.float32)
            p["mean"] = rng.normal(0, 0.3, c).astype(np.float32)
            p["variance"] = rng.uniform(0.3, 2.0, c).astype(np.float32)
    return weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    g = small_net()
    w = randomize_bn(g, init_weights(g, 0), np.random.default_rng(0))
    return g, w


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
