"""Layer graphs: structure, shape inference, forward execution and cost accounting."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import CoverageError, DimensionError, StructureError

KINDS = ("input", "conv2d", "depthwise", "dense", "batchnorm", "activation",
         "pool", "add", "dropout", "flatten")

# Parameter names per layer kind, in serialization order.
PARAM_NAMES = {
    "conv2d": ("kernel", "bias"),
    "depthwise": ("kernel", "bias"),
    "dense": ("kernel", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "variance"),
}

WeightStore = Dict[str, Dict[str, np.ndarray]]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructureError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        want = 0 if self.kind == "input" else 2 if self.kind == "add" else 1
        if len(self.inputs) != want:
            raise StructureError(
                f"layer {self.name!r} ({self.kind}) needs {want} inputs, got {len(self.inputs)}")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_NAMES

    def param_names(self) -> tuple:
        names = PARAM_NAMES.get(self.kind, ())
        if self.kind != "batchnorm" and not self.attrs.get("use_bias", True):
            names = names[:1]
        return names

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": _jsonable(self.attrs)}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], tuple(d["inputs"]), dict(d.get("attrs", {})))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


class Graph:
    """Validated DAG of layers, held in topological order.

    The constructor accepts layers in any order; ties in the topological sort
    are broken by the order given, so a graph built twice is identical.
    """

    def __init__(self, layers: Iterable[LayerSpec], metadata: Optional[dict] = None):
        layers = list(layers)
        self.metadata = dict(metadata or {})
        by_name: Dict[str, LayerSpec] = {}
        for layer in layers:
            if layer.name in by_name:
                raise StructureError(f"duplicate layer name {layer.name!r}")
            by_name[layer.name] = layer
        for layer in layers:
            for src in layer.inputs:
                if src not in by_name:
                    raise StructureError(f"layer {layer.name!r} references missing input {src!r}")
        self.layers: List[LayerSpec] = _toposort(layers)
        self.by_name = by_name
        inputs = [l for l in self.layers if l.kind == "input"]
        if len(inputs) != 1:
            raise StructureError(f"graph needs exactly one input layer, found {len(inputs)}")
        consumed = {src for l in self.layers for src in l.inputs}
        outputs = [l for l in self.layers if l.name not in consumed]
        if len(outputs) != 1:
            raise StructureError(
                f"graph needs exactly one output layer, found {[l.name for l in outputs]}")
        self.input = inputs[0]
        self.output = outputs[0]
        alpha = self.metadata.get("alpha", 1.0)
        if not alpha > 0:
            raise StructureError(f"alpha must be positive, got {alpha}")
        if self.metadata.get("num_classes", 2) < 2:
            raise StructureError("class count must be at least 2")

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, name: str) -> LayerSpec:
        return self.by_name[name]

    def __contains__(self, name) -> bool:
        return name in self.by_name

    @property
    def num_classes(self) -> int:
        return int(self.metadata.get("num_classes", 0))

    @property
    def input_shape(self) -> tuple:
        return tuple(self.input.attrs["shape"])

    def count(self, kind: str) -> int:
        return sum(1 for l in self.layers if l.kind == kind)

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {l.name: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                out[src].append(l.name)
        return out

    def replace(self, layers: Iterable[LayerSpec], **meta) -> "Graph":
        md = dict(self.metadata)
        md.update(meta)
        return Graph(layers, md)

    def to_json(self) -> dict:
        return {"metadata": _jsonable(self.metadata),
                "layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> "Graph":
        return cls([LayerSpec.from_json(x) for x in d["layers"]], d.get("metadata", {}))


def _toposort(layers: List[LayerSpec]) -> List[LayerSpec]:
    indeg = {l.name: len(set(l.inputs)) for l in layers}
    order_of = {l.name: i for i, l in enumerate(layers)}
    users: Dict[str, List[str]] = {l.name: [] for l in layers}
    for l in layers:
        for src in set(l.inputs):
            users[src].append(l.name)
    by_name = {l.name: l for l in layers}
    ready = [(order_of[n], n) for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, name = heapq.heappop(ready)
        out.append(by_name[name])
        for u in users[name]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, (order_of[u], u))
    if len(out) != len(layers):
        raise StructureError("graph contains a cycle")
    return out


# ---------------------------------------------------------------------------
# shape inference

def infer_shapes(graph: Graph) -> Dict[str, tuple]:
    """Per-layer output shape (batch dim excluded) without touching weights."""
    shapes: Dict[str, tuple] = {}
    for layer in graph:
        a = layer.attrs
        ins = [shapes[s] for s in layer.inputs]
        k = layer.kind
        if k == "input":
            out = tuple(a["shape"])
        elif k in ("conv2d", "depthwise"):
            if len(ins[0]) != 3:
                raise DimensionError(f"layer {layer.name!r}: expects H,W,C input, got {ins[0]}")
            h, w, c = ins[0]
            kh, kw = a["kernel"]
            oh, ow, _ = T.conv_geometry(h, w, kh, kw, a.get("stride", 1), a.get("padding", "same"))
            out = (oh, ow, a["filters"] if k == "conv2d" else c)
        elif k == "dense":
            if len(ins[0]) != 1:
                raise DimensionError(f"layer {layer.name!r}: expects flat input, got {ins[0]}")
            out = (a["units"],)
        elif k == "pool":
            if len(ins[0]) != 3:
                raise DimensionError(f"layer {layer.name!r}: expects H,W,C input, got {ins[0]}")
            h, w, c = ins[0]
            if a["fn"] == "global_avg":
                out = (c,)
            else:
                kh, kw = T._pair(a.get("window", 2))
                if a.get("padding", "valid") == "valid" and (kh > h or kw > w):
                    raise DimensionError(f"layer {layer.name!r}: pool window larger than {ins[0]}")
                oh, ow, _ = T.conv_geometry(h, w, kh, kw, a.get("stride", a.get("window", 2)),
                                            a.get("padding", "valid"))
                out = (oh, ow, c)
        elif k == "add":
            if ins[0] != ins[1]:
                raise DimensionError(f"layer {layer.name!r}: adds shapes {ins[0]} and {ins[1]}")
            out = ins[0]
        elif k == "flatten":
            out = (int(np.prod(ins[0])),)
        else:
            out = ins[0]
        if any(d < 1 for d in out):
            raise DimensionError(f"layer {layer.name!r}: non-positive output shape {out}")
        shapes[layer.name] = out
    return shapes


def param_shapes(graph: Graph, shapes: Optional[Dict[str, tuple]] = None) -> Dict[str, Dict[str, tuple]]:
    """Expected shape of every parameter tensor, derived from the layer specs."""
    shapes = shapes or infer_shapes(graph)
    out: Dict[str, Dict[str, tuple]] = {}
    for layer in graph:
        if not layer.has_params:
            continue
        a = layer.attrs
        cin = shapes[layer.inputs[0]][-1]
        if layer.kind == "conv2d":
            p = {"kernel": (*a["kernel"], cin, a["filters"]), "bias": (a["filters"],)}
        elif layer.kind == "depthwise":
            p = {"kernel": (*a["kernel"], cin, 1), "bias": (cin,)}
        elif layer.kind == "dense":
            p = {"kernel": (cin, a["units"]), "bias": (a["units"],)}
        else:
            p = {n: (cin,) for n in PARAM_NAMES["batchnorm"]}
        out[layer.name] = {n: p[n] for n in layer.param_names()}
    return out


def check_weights(graph: Graph, weights: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    for lname, params in param_shapes(graph).items():
        if lname not in weights:
            raise CoverageError(f"missing weights for layer {lname!r}")
        for pname, shape in params.items():
            if pname not in weights[lname]:
                raise CoverageError(f"missing {pname!r} for layer {lname!r}")
            got = tuple(weights[lname][pname].shape)
            if got != tuple(shape):
                raise DimensionError(
                    f"layer {lname!r} {pname}: expected shape {tuple(shape)}, got {got}")


# ---------------------------------------------------------------------------
# execution

def bn_params(p: Mapping[str, np.ndarray], eps: float) -> T.BatchNormParams:
    return T.BatchNormParams(p["mean"], p["variance"], p["gamma"], p["beta"], eps)


def run_layer(layer: LayerSpec, ins: List[np.ndarray], params: Mapping[str, np.ndarray],
              mode: str = "infer", rng: Optional[np.random.Generator] = None,
              masks: Optional[dict] = None) -> np.ndarray:
    a = layer.attrs
    k = layer.kind
    x = ins[0] if ins else None
    if k == "conv2d":
        return T.conv2d(x, params["kernel"], params.get("bias"),
                        a.get("stride", 1), a.get("padding", "same"))
    if k == "depthwise":
        return T.depthwise_conv2d(x, params["kernel"], params.get("bias"),
                                  a.get("stride", 1), a.get("padding", "same"))
    if k == "dense":
        return T.dense(x, params["kernel"], params.get("bias"))
    if k == "batchnorm":
        return T.batch_norm_inference(x, bn_params(params, a.get("epsilon", 1e-3)))
    if k == "activation":
        return T.activation(x, a["fn"])
    if k == "pool":
        return T.pool(x, a["fn"], a.get("window", 2), a.get("stride"), a.get("padding", "valid"))
    if k == "add":
        return T.residual_add(ins[0], ins[1])
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    if k == "dropout":
        rate = float(a.get("rate", 0.0))
        if mode != "train" or rate <= 0:
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.float32(1.0 - rate)
        if masks is not None:
            masks[layer.name] = keep
        return x * keep
    raise StructureError(f"cannot execute layer kind {k!r}")


def forward(graph: Graph, weights: Mapping[str, Mapping[str, np.ndarray]], x: np.ndarray,
            mode: str = "infer", rng: Optional[np.random.Generator] = None,
            keep: Optional[set] = None, cache: Optional[dict] = None,
            observer: Optional[Callable[[LayerSpec, np.ndarray], None]] = None) -> np.ndarray:
    """Run the graph on a batch and return the output layer's tensor.

    When ``cache`` is given, outputs of the layers named in ``keep`` (all
    layers if ``keep`` is None) are stored in ``cache["outputs"]`` and
    train-mode dropout masks in ``cache["masks"]``.  ``observer`` is called
    with every layer and its output as execution proceeds.
    """
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape[1:]) != graph.input_shape:
        raise DimensionError(
            f"layer {graph.input.name!r}: expected input (N, {', '.join(map(str, graph.input_shape))}),"
            f" got {tuple(x.shape)}")
    remaining = {n: len(c) for n, c in graph.consumers().items()}
    outs: Dict[str, np.ndarray] = {}
    store = cache.setdefault("outputs", {}) if cache is not None else None
    masks = cache.setdefault("masks", {}) if cache is not None else None
    for layer in graph:
        if layer.kind == "input":
            y = x
        else:
            params = {}
            if layer.has_params:
                if layer.name not in weights:
                    raise CoverageError(f"missing weights for layer {layer.name!r}")
                params = weights[layer.name]
            try:
                y = run_layer(layer, [outs[s] for s in layer.inputs], params, mode, rng, masks)
            except DimensionError as e:
                raise DimensionError(f"layer {layer.name!r}: {e}") from None
            except KeyError as e:
                raise CoverageError(f"missing {e.args[0]!r} for layer {layer.name!r}") from None
            for s in layer.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s != graph.output.name:
                    outs.pop(s, None)
        outs[layer.name] = y
        if observer is not None:
            observer(layer, y)
        if store is not None and (keep is None or layer.name in keep):
            store[layer.name] = y
    return outs[graph.output.name]


def predict_batches(fn, xs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([fn(xs[i:i + batch_size]) for i in range(0, len(xs), batch_size)])


# ---------------------------------------------------------------------------
# accounting

@dataclass(frozen=True)
class GraphStats:
    parameter_count: int
    flops: int
    bytes: int
    element_bits: int

    def to_dict(self) -> dict:
        return {"parameter_count": self.parameter_count, "flops": self.flops,
                "bytes": self.bytes, "element_bits": self.element_bits}


def layer_flops(graph: Graph, shapes: Optional[Dict[str, tuple]] = None) -> Dict[str, int]:
    """Operation count per layer for one image; a multiply-add counts once.

    Batchnorm is treated as folded into the preceding convolution and costs
    nothing; activations, adds and pooling cost one op per element touched.
    """
    shapes = shapes or infer_shapes(graph)
    out = {}
    for layer in graph:
        a = layer.attrs
        o = shapes[layer.name]
        n_out = int(np.prod(o))
        bias = n_out if a.get("use_bias", True) else 0
        k = layer.kind
        if k == "conv2d":
            kh, kw = a["kernel"]
            f = kh * kw * shapes[layer.inputs[0]][-1] * n_out + bias
        elif k == "depthwise":
            kh, kw = a["kernel"]
            f = kh * kw * n_out + bias
        elif k == "dense":
            f = shapes[layer.inputs[0]][0] * n_out + bias
        elif k in ("activation", "add"):
            f = n_out
        elif k == "pool":
            if a["fn"] == "global_avg":
                f = int(np.prod(shapes[layer.inputs[0]]))
            else:
                kh, kw = T._pair(a.get("window", 2))
                f = kh * kw * n_out
        else:
            f = 0
        out[layer.name] = int(f)
    return out


def parameter_count(graph: Graph) -> int:
    return sum(int(np.prod(s)) for p in param_shapes(graph).values() for s in p.values())


def stats(graph: Graph, element_bits: int = 32) -> GraphStats:
    from .container import estimate_size

    if element_bits not in (32, 16, 8):
        raise ValueError(f"element_bits must be 32, 16 or 8, got {element_bits}")
    dtype = {32: "f32", 16: "f16", 8: "i8"}[element_bits]
    return GraphStats(parameter_count=parameter_count(graph),
                      flops=sum(layer_flops(graph).values()),
                      bytes=estimate_size(graph, dtype),
                      element_bits=element_bits)
