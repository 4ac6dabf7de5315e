"""Post-training quantization: batchnorm folding, f16 narrowing, calibration and i8."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .container import Model, atomic_write, load
from .errors import CoverageError, DimensionError, IntegrityError, StructureError, UsageError
from .graph import Graph, LayerSpec, WeightStore, forward
from .qtensor import (QMAX, QMIN, QuantizedTensor, affine_params, dequantize, quantize,
                      round_half_away, symmetric_scales)

F16_MAX = float(np.finfo(np.float16).max)
DEGENERATE_WIDEN = 1e-3

# output-channel axis of each kernel layout
KERNEL_AXIS = {"conv2d": 3, "depthwise": 2, "dense": 1}


# ---------------------------------------------------------------------------
# batchnorm folding

def fold_batchnorm(graph: Graph, weights: WeightStore) -> Tuple[Graph, WeightStore]:
    """Absorb every inference batchnorm into the conv/depthwise feeding it."""
    consumers = graph.consumers()
    bns = {l.name: l for l in graph if l.kind == "batchnorm"}
    folded_into: Dict[str, str] = {}
    new_weights: WeightStore = {k: dict(v) for k, v in weights.items()}
    for name, bn in bns.items():
        src = graph[bn.inputs[0]]
        if src.kind not in ("conv2d", "depthwise"):
            raise StructureError(f"batchnorm {name!r} follows {src.kind} layer {src.name!r}, not a conv")
        if consumers[src.name] != [name]:
            raise StructureError(f"conv {src.name!r} feeds layers besides batchnorm {name!r}")
        p = weights[name]
        scale = p["gamma"].astype(np.float64) / np.sqrt(
            p["variance"].astype(np.float64) + bn.attrs.get("epsilon", 1e-3))
        kernel = weights[src.name]["kernel"].astype(np.float64)
        if src.kind == "conv2d":
            kernel = kernel * scale
        else:
            kernel = kernel * scale[None, None, :, None]
        bias = weights[src.name].get("bias")
        bias = np.zeros_like(scale) if bias is None else bias.astype(np.float64)
        bias = (bias - p["mean"]) * scale + p["beta"]
        new_weights[src.name] = {"kernel": kernel.astype(np.float32), "bias": bias.astype(np.float32)}
        new_weights.pop(name, None)
        folded_into[name] = src.name

    def rename(n):
        return folded_into.get(n, n)

    layers = []
    for l in graph:
        if l.kind == "batchnorm":
            continue
        attrs = dict(l.attrs)
        if l.name in folded_into.values():
            attrs["use_bias"] = True
        layers.append(LayerSpec(l.name, l.kind, tuple(rename(s) for s in l.inputs), attrs))
    return graph.replace(layers, folded=True), new_weights


# ---------------------------------------------------------------------------
# f16

@dataclass
class F16Blob:
    weights: Dict[str, Dict[str, np.ndarray]]

    def widen(self) -> WeightStore:
        return {l: {p: a.astype(np.float32) for p, a in ps.items()} for l, ps in self.weights.items()}


def to_f16(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even binary16, saturating at the largest finite value."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise IntegrityError("cannot narrow non-finite weights to f16")
    return np.clip(x, -F16_MAX, F16_MAX).astype(np.float16)


def quantize_f16(weights: Mapping[str, Mapping[str, np.ndarray]]) -> F16Blob:
    out = {}
    for lname, params in weights.items():
        out[lname] = {}
        for pname, arr in params.items():
            try:
                out[lname][pname] = to_f16(arr)
            except IntegrityError:
                raise IntegrityError(f"layer {lname!r} {pname}: non-finite weight") from None
    return F16Blob(out)


def f16_model(graph: Graph, weights: WeightStore) -> Model:
    return Model(graph, quantize_f16(weights).weights, "f16")


# ---------------------------------------------------------------------------
# calibration

@dataclass
class CalibrationProfile:
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    samples: int = 0

    def update(self, name: str, y: np.ndarray) -> None:
        # ranges always contain 0 so zero padding stays exactly representable
        lo, hi = min(float(np.min(y)), 0.0), max(float(np.max(y)), 0.0)
        if name in self.ranges:
            a, b = self.ranges[name]
            lo, hi = min(a, lo), max(b, hi)
        self.ranges[name] = (lo, hi)

    def merge(self, other: "CalibrationProfile") -> "CalibrationProfile":
        out = CalibrationProfile(dict(self.ranges), self.samples + other.samples)
        for k, (lo, hi) in other.ranges.items():
            if k in out.ranges:
                a, b = out.ranges[k]
                lo, hi = min(a, lo), max(b, hi)
            out.ranges[k] = (lo, hi)
        return out

    def to_json(self) -> dict:
        return {k: {"min": lo, "max": hi, "samples": self.samples}
                for k, (lo, hi) in self.ranges.items()}

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationProfile":
        ranges = {k: (float(v["min"]), float(v["max"])) for k, v in d.items()}
        samples = min((int(v["samples"]) for v in d.values()), default=0)
        return cls(ranges, samples)

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_json(), indent=1, sort_keys=True).encode())

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        return cls.from_json(json.loads(Path(path).read_text()))


def calibrate(graph: Graph, weights: WeightStore, calibration_set: Sequence[np.ndarray],
              batch_size: int = 16) -> CalibrationProfile:
    """Record the running min/max of every layer output over the calibration set."""
    if len(calibration_set) == 0:
        raise UsageError("calibration set is empty")
    xs = np.concatenate([np.asarray(x, np.float32).reshape((-1,) + graph.input_shape)
                         for x in calibration_set])
    profile = CalibrationProfile()
    for i in range(0, len(xs), batch_size):
        forward(graph, weights, xs[i:i + batch_size], mode="infer",
                observer=lambda layer, y: profile.update(layer.name, y))
    profile.samples = len(xs)
    return profile


# ---------------------------------------------------------------------------
# fixed-point requantization

def quantize_multiplier(m) -> Tuple[np.ndarray, np.ndarray]:
    """Split positive real multipliers into (m0, shift) with m ~= m0 / 2**shift.

    m0 is a 31-bit integer in [2**30, 2**31).
    """
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    if np.any(m <= 0):
        raise ValueError("requantization multipliers must be positive")
    frac, exp = np.frexp(m)
    m0 = np.rint(frac * (1 << 31)).astype(np.int64)
    carry = m0 == (1 << 31)
    m0 = np.where(carry, m0 // 2, m0)
    exp = np.where(carry, exp + 1, exp)
    shift = (31 - exp).astype(np.int64)
    if np.any(shift < 1):
        raise ValueError("requantization multiplier too large")
    return m0, shift


def requantize_fixed(acc: np.ndarray, m0: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """round_half_away(acc * m0 / 2**shift) using only int64 arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    if np.any(np.abs(acc) >= (1 << 31)):
        raise IntegrityError("accumulator overflows int32")
    m0 = np.asarray(m0, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    prod = acc * m0
    big = shift > 62
    s = np.where(big, 62, shift)
    half = np.left_shift(np.int64(1), s - 1)
    mag = np.right_shift(np.abs(prod) + half, s)
    return np.where(big, 0, np.sign(prod) * mag)


def requantize_reference(acc: np.ndarray, m0: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Float-scaled twin of :func:`requantize_fixed` in extended precision."""
    scale = np.asarray(m0, dtype=np.longdouble) / np.power(np.longdouble(2), np.asarray(shift))
    return round_half_away(np.asarray(acc, dtype=np.longdouble) * scale).astype(np.int64)


# ---------------------------------------------------------------------------
# i8 quantization and inference

FUSABLE = ("conv2d", "depthwise", "dense")
PASSTHROUGH = ("dropout", "flatten")


def _fused_activation(graph: Graph, consumers, layer: LayerSpec) -> Optional[LayerSpec]:
    if layer.kind not in FUSABLE:
        return None
    users = consumers[layer.name]
    if len(users) == 1:
        u = graph[users[0]]
        if u.kind == "activation" and u.attrs["fn"] in ("relu", "relu6"):
            return u
    return None


def _activation_plan(graph: Graph) -> Dict[str, Tuple[str, str]]:
    """For each layer: (role, name of the layer whose profiled range it uses).

    role is one of "quant" (own params), "fused" (producer already applied
    the activation), "same" (inherits input params) or "float".
    """
    consumers = graph.consumers()
    plan: Dict[str, Tuple[str, str]] = {}
    for layer in graph:
        k = layer.kind
        if k in FUSABLE:
            act = _fused_activation(graph, consumers, layer)
            plan[layer.name] = ("quant", act.name if act else layer.name)
        elif k == "activation" and layer.attrs["fn"] == "softmax":
            plan[layer.name] = ("float", layer.name)
        elif k == "activation" and plan[layer.inputs[0]][0] == "quant" and \
                _fused_activation(graph, consumers, graph[layer.inputs[0]]) is layer:
            plan[layer.name] = ("fused", layer.inputs[0])
        elif k in PASSTHROUGH or (k == "pool" and layer.attrs["fn"] == "max"):
            plan[layer.name] = ("same", layer.inputs[0])
        else:
            plan[layer.name] = ("quant", layer.name)
    return plan


def _range(profile: CalibrationProfile, name: str) -> Tuple[float, float]:
    if name not in profile.ranges:
        raise CoverageError(f"calibration profile has no entry for layer {name!r}")
    lo, hi = profile.ranges[name]
    if lo > hi:
        raise IntegrityError(f"layer {name!r}: calibration min {lo} > max {hi}")
    if lo == hi:
        lo, hi = lo - DEGENERATE_WIDEN, hi + DEGENERATE_WIDEN
    return lo, hi


def quantize_i8(graph: Graph, weights: WeightStore, profile: CalibrationProfile) -> Model:
    """Symmetric per-channel i8 weights, asymmetric per-tensor i8 activations."""
    if graph.count("batchnorm"):
        raise StructureError("fold batchnorm before i8 quantization")
    plan = _activation_plan(graph)
    acts: Dict[str, dict] = {}
    for layer in graph:
        role, src = plan[layer.name]
        if role == "quant":
            scale, zp = affine_params(*_range(profile, src))
            acts[layer.name] = {"scale": scale, "zero_point": zp}
    for layer in graph:
        role, src = plan[layer.name]
        if role in ("fused", "same"):
            acts[layer.name] = dict(acts[src])

    qweights: Dict[str, Dict[str, QuantizedTensor]] = {}
    for layer in graph:
        if not layer.has_params:
            continue
        axis = KERNEL_AXIS[layer.kind]
        kernel = weights[layer.name]["kernel"]
        w_scale = symmetric_scales(kernel, axis)
        qk = quantize(kernel, w_scale, 0, axis)
        in_scale = acts[layer.inputs[0]]["scale"]
        bias_scale = (np.float64(in_scale) * w_scale.astype(np.float64)).astype(np.float32)
        bias = weights[layer.name].get("bias")
        if bias is None:
            bias = np.zeros(len(w_scale), np.float32)
        codes = round_half_away(bias.astype(np.float64) / bias_scale.astype(np.float64))
        codes = np.clip(codes, np.iinfo(np.int32).min, np.iinfo(np.int32).max).astype(np.int32)
        qweights[layer.name] = {"kernel": qk, "bias": QuantizedTensor(codes, bias_scale, 0, 0)}
    layers = [LayerSpec(l.name, l.kind, l.inputs, dict(l.attrs, use_bias=True) if l.has_params else l.attrs)
              for l in graph]
    return Model(graph.replace(layers), qweights, "i8", acts)


def _quantize_activation(x: np.ndarray, p: dict) -> np.ndarray:
    return quantize(x, p["scale"], p["zero_point"]).data


def _dequant_act(q: np.ndarray, p: dict) -> np.ndarray:
    return ((q.astype(np.float32) - np.float32(p["zero_point"])) * np.float32(p["scale"]))


def _requant_float(x: np.ndarray, p: dict) -> np.ndarray:
    codes = round_half_away(x.astype(np.float64) / np.float64(p["scale"])) + p["zero_point"]
    return np.clip(codes, QMIN, QMAX).astype(np.int8)


def _int_layer(layer: LayerSpec, q: np.ndarray, p_in: dict, w: dict, p_out: dict,
               act: Optional[LayerSpec]) -> np.ndarray:
    x = q.astype(np.float64) - p_in["zero_point"]
    kq: QuantizedTensor = w["kernel"]
    k = kq.data.astype(np.float64)
    a = layer.attrs
    if layer.kind == "conv2d":
        acc = T.conv2d(x, k, None, a.get("stride", 1), a.get("padding", "same"))
    elif layer.kind == "depthwise":
        acc = T.depthwise_conv2d(x, k, None, a.get("stride", 1), a.get("padding", "same"))
    else:
        acc = T.dense(x, k)
    acc = np.rint(acc).astype(np.int64) + w["bias"].data.astype(np.int64)
    mult = np.float64(p_in["scale"]) * kq.scale.astype(np.float64) / np.float64(p_out["scale"])
    m0, shift = quantize_multiplier(mult)
    out = requantize_fixed(acc, m0, shift) + p_out["zero_point"]
    lo = QMIN
    hi = QMAX
    if act is not None:
        lo = max(lo, p_out["zero_point"])
        if act.attrs["fn"] == "relu6":
            six = round_half_away(np.float64(6.0) / np.float64(p_out["scale"])) + p_out["zero_point"]
            hi = int(min(hi, six))
    return np.clip(out, lo, hi).astype(np.int8)


def forward_i8(model: Model, x: np.ndarray) -> np.ndarray:
    """Integer inference; returns float32 class probabilities."""
    graph = model.graph
    acts = model.activations
    x = np.asarray(x, dtype=np.float32)
    consumers = graph.consumers()
    outs: Dict[str, np.ndarray] = {}
    for layer in graph:
        k = layer.kind
        ins = [outs[s] for s in layer.inputs]
        p_out = acts.get(layer.name)
        if k == "input":
            if tuple(x.shape[1:]) != graph.input_shape:
                raise DimensionError(f"expected input (N, {graph.input_shape}), got {x.shape}")
            y = _quantize_activation(x, p_out)
        elif k in FUSABLE:
            src = layer.inputs[0]
            y = _int_layer(layer, ins[0], acts[src], model.weights[layer.name], p_out,
                           _fused_activation(graph, consumers, layer))
        elif k == "activation":
            fn = layer.attrs["fn"]
            src = layer.inputs[0]
            if fn == "softmax":
                y = T.softmax(_dequant_act(ins[0], acts[src]))
            elif graph[src].kind in FUSABLE and _fused_activation(graph, consumers, graph[src]) is layer:
                y = ins[0]
            else:
                real = T.activation(_dequant_act(ins[0], acts[src]), fn)
                y = _requant_float(real, p_out)
        elif k == "add":
            a, b = layer.inputs
            y = _requant_float(_dequant_act(ins[0], acts[a]).astype(np.float64)
                               + _dequant_act(ins[1], acts[b]), p_out)
        elif k == "pool":
            if layer.attrs["fn"] == "max":
                y = T.pool(ins[0].astype(np.float32), "max", layer.attrs.get("window", 2),
                           layer.attrs.get("stride"), layer.attrs.get("padding", "valid")).astype(np.int8)
            else:
                centered = ins[0].astype(np.float64) - acts[layer.inputs[0]]["zero_point"]
                mean = centered.mean(axis=(1, 2)) * np.float64(acts[layer.inputs[0]]["scale"])
                y = _requant_float(mean, p_out)
        elif k == "flatten":
            y = ins[0].reshape(ins[0].shape[0], -1)
        elif k == "dropout":
            y = ins[0]
        else:
            raise StructureError(f"i8 inference cannot run layer kind {k!r}")
        outs[layer.name] = y
    out = outs[graph.output.name]
    if out.dtype == np.int8:
        out = _dequant_act(out, acts[graph.output.name])
    return out


# ---------------------------------------------------------------------------
# size report

def _arch_key(model: Model) -> tuple:
    md = model.graph.metadata
    return (md.get("architecture"), md.get("num_classes"), md.get("alpha"), md.get("resolution"))


def size_report(paths: Iterable) -> List[dict]:
    """On-disk byte counts and ratios against the f32 file, one row per dtype."""
    paths = list(paths)
    if len(paths) < 2:
        raise UsageError("size report needs the same model at two or more dtypes")
    rows = []
    keys = set()
    for p in paths:
        m = load(p)
        keys.add(_arch_key(m))
        rows.append({"dtype": m.dtype, "bytes": Path(p).stat().st_size, "path": str(p)})
    if len(keys) != 1:
        raise UsageError(f"size report mixes architectures: {sorted(map(str, keys))}")
    base = [r["bytes"] for r in rows if r["dtype"] == "f32"]
    if not base:
        raise UsageError("size report needs an f32 model as the baseline")
    for r in rows:
        r["ratio_vs_f32"] = r["bytes"] / base[0]
    order = {"f32": 0, "f16": 1, "i8": 2}
    return sorted(rows, key=lambda r: order[r["dtype"]])
