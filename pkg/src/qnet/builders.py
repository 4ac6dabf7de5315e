"""ResNet50, MobileNetV1 and MobileNetV2 builders with transfer-learning heads."""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .errors import ConfigError
from .graph import Graph, LayerSpec, WeightStore, param_shapes

RESOLUTIONS = (96, 128, 160, 192, 224)

RESNET_HEAD = {"hidden_units": 256, "dropout": 0.5}
MOBILENET_HEAD = {"hidden_units": 0, "dropout": 0.25}

MOBILENET_V1_BLOCKS = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
                       (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]

# (expansion, output channels, repeats, first stride)
MOBILENET_V2_BLOCKS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                       (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def round_channels(channels: float, divisor: int = 8) -> int:
    """Nearest multiple of ``divisor`` (halves round up), never below ``divisor``
    and never more than 10% under ``channels``."""
    out = max(divisor, int(channels + divisor / 2) // divisor * divisor)
    if out < 0.9 * channels:
        out += divisor
    return out


class _Builder:
    def __init__(self):
        self.layers: List[LayerSpec] = []
        self.last: Optional[str] = None

    def add(self, name, kind, inputs=None, **attrs) -> str:
        if inputs is None:
            inputs = () if self.last is None else (self.last,)
        self.layers.append(LayerSpec(name, kind, tuple(inputs), attrs))
        self.last = name
        return name

    def conv_bn(self, name, filters, kernel, stride=1, act="relu", src=None):
        self.add(f"{name}_conv", "conv2d", (src,) if src else None, filters=int(filters),
                 kernel=[kernel, kernel], stride=stride, padding="same", use_bias=False)
        self.add(f"{name}_bn", "batchnorm", epsilon=1e-3)
        if act:
            self.add(f"{name}_{act}", "activation", fn=act)
        return self.last

    def dw_bn(self, name, stride, act="relu6"):
        self.add(f"{name}_dw", "depthwise", kernel=[3, 3], stride=stride, padding="same",
                 use_bias=False)
        self.add(f"{name}_dw_bn", "batchnorm", epsilon=1e-3)
        self.add(f"{name}_dw_{act}", "activation", fn=act)
        return self.last

    def head(self, num_classes, hidden_units, dropout):
        self.add("head_pool", "pool", fn="global_avg", head=True)
        if hidden_units:
            self.add("head_dense", "dense", units=hidden_units, use_bias=True, head=True)
            self.add("head_relu", "activation", fn="relu", head=True)
        self.add("head_dropout", "dropout", rate=dropout, head=True)
        self.add("logits", "dense", units=num_classes, use_bias=True, head=True)
        self.add("probs", "activation", fn="softmax", head=True)


def _check_classes(num_classes):
    if int(num_classes) < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")


def _check_mobilenet(alpha, resolution, num_classes):
    _check_classes(num_classes)
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")


def build_resnet50(num_classes: int, resolution: int = 224) -> Graph:
    _check_classes(num_classes)
    b = _Builder()
    b.add("input", "input", shape=[resolution, resolution, 3])
    b.conv_bn("conv1", 64, 7, stride=2)
    b.add("pool1", "pool", fn="max", window=[3, 3], stride=2, padding="same")
    stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
    for si, (width, blocks, stride) in enumerate(stages, start=2):
        for bi in range(1, blocks + 1):
            s = stride if bi == 1 else 1
            name = f"conv{si}_block{bi}"
            block_in = b.last
            if bi == 1:
                shortcut = b.conv_bn(f"{name}_0", width * 4, 1, stride=s, act=None, src=block_in)
            else:
                shortcut = block_in
            b.conv_bn(f"{name}_1", width, 1, src=block_in)
            b.conv_bn(f"{name}_2", width, 3, stride=s)
            residual = b.conv_bn(f"{name}_3", width * 4, 1, act=None)
            b.add(f"{name}_add", "add", (shortcut, residual))
            b.add(f"{name}_out", "activation", fn="relu")
    b.head(num_classes, **RESNET_HEAD)
    meta = {"architecture": "resnet50", "num_classes": int(num_classes), "alpha": 1.0,
            "resolution": resolution, "head": dict(RESNET_HEAD),
            "preprocess": "resnet_mean_subtract"}
    return Graph(b.layers, meta)


def build_mobilenet_v1(alpha: float = 1.0, resolution: int = 224, num_classes: int = 3) -> Graph:
    _check_mobilenet(alpha, resolution, num_classes)
    b = _Builder()
    b.add("input", "input", shape=[resolution, resolution, 3])
    b.add("conv1", "conv2d", filters=round_channels(32 * alpha), kernel=[3, 3], stride=2,
          padding="same", use_bias=False)
    b.add("conv1_bn", "batchnorm", epsilon=1e-3)
    b.add("conv1_relu6", "activation", fn="relu6")
    for i, (filters, stride) in enumerate(MOBILENET_V1_BLOCKS, start=1):
        b.dw_bn(f"block{i}", stride)
        b.add(f"block{i}_pw", "conv2d", filters=round_channels(filters * alpha), kernel=[1, 1],
              stride=1, padding="same", use_bias=False)
        b.add(f"block{i}_pw_bn", "batchnorm", epsilon=1e-3)
        b.add(f"block{i}_pw_relu6", "activation", fn="relu6")
    b.head(num_classes, **MOBILENET_HEAD)
    meta = {"architecture": "mobilenetv1", "num_classes": int(num_classes), "alpha": float(alpha),
            "resolution": resolution, "head": dict(MOBILENET_HEAD),
            "preprocess": "mobilenet_unit_range"}
    return Graph(b.layers, meta)


def build_mobilenet_v2(alpha: float = 1.0, resolution: int = 224, num_classes: int = 3) -> Graph:
    _check_mobilenet(alpha, resolution, num_classes)
    b = _Builder()
    b.add("input", "input", shape=[resolution, resolution, 3])
    channels = round_channels(32 * alpha)
    b.add("conv1", "conv2d", filters=channels, kernel=[3, 3], stride=2, padding="same",
          use_bias=False)
    b.add("conv1_bn", "batchnorm", epsilon=1e-3)
    b.add("conv1_relu6", "activation", fn="relu6")
    idx = 0
    for t, c, n, s in MOBILENET_V2_BLOCKS:
        out_ch = round_channels(c * alpha)
        for r in range(n):
            idx += 1
            stride = s if r == 0 else 1
            name = f"block{idx}"
            block_in = b.last
            if t != 1:
                b.add(f"{name}_expand", "conv2d", filters=channels * t, kernel=[1, 1], stride=1,
                      padding="same", use_bias=False)
                b.add(f"{name}_expand_bn", "batchnorm", epsilon=1e-3)
                b.add(f"{name}_expand_relu6", "activation", fn="relu6")
            b.dw_bn(name, stride)
            b.add(f"{name}_project", "conv2d", filters=out_ch, kernel=[1, 1], stride=1,
                  padding="same", use_bias=False)
            b.add(f"{name}_project_bn", "batchnorm", epsilon=1e-3)
            if stride == 1 and channels == out_ch:
                b.add(f"{name}_add", "add", (block_in, b.last))
            channels = out_ch
    last = 1280 if alpha <= 1.0 else round_channels(1280 * alpha)
    b.add("conv_last", "conv2d", filters=last, kernel=[1, 1], stride=1, padding="same",
          use_bias=False)
    b.add("conv_last_bn", "batchnorm", epsilon=1e-3)
    b.add("conv_last_relu6", "activation", fn="relu6")
    b.head(num_classes, **MOBILENET_HEAD)
    meta = {"architecture": "mobilenetv2", "num_classes": int(num_classes), "alpha": float(alpha),
            "resolution": resolution, "head": dict(MOBILENET_HEAD),
            "preprocess": "mobilenet_unit_range"}
    return Graph(b.layers, meta)


def build(arch: str, num_classes: int, alpha: float = 1.0, resolution: int = 224) -> Graph:
    if arch == "resnet50":
        if alpha != 1.0:
            raise ConfigError("resnet50 has no width multiplier")
        return build_resnet50(num_classes, resolution)
    if arch == "mobilenetv1":
        return build_mobilenet_v1(alpha, resolution, num_classes)
    if arch == "mobilenetv2":
        return build_mobilenet_v2(alpha, resolution, num_classes)
    raise ConfigError(f"unknown architecture {arch!r}")


def init_weights(graph: Graph, seed: int = 0) -> WeightStore:
    """He-uniform kernels, zero biases, identity batchnorm statistics."""
    rng = np.random.default_rng(seed)
    weights: WeightStore = {}
    for lname, params in param_shapes(graph).items():
        kind = graph[lname].kind
        w = {}
        for pname, shape in params.items():
            if pname == "kernel":
                fan_in = int(np.prod(shape[:-1])) if kind != "depthwise" else shape[0] * shape[1]
                limit = np.sqrt(6.0 / fan_in)
                w[pname] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            elif pname in ("gamma", "variance"):
                w[pname] = np.ones(shape, np.float32)
            else:
                w[pname] = np.zeros(shape, np.float32)
        weights[lname] = w
    return weights
