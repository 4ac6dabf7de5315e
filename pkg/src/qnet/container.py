"""QNET model container.

Layout (little-endian)::

    "QNET" | u16 version | u8 dtype tag (0=f32, 1=f16, 2=i8)
    u32 json length | UTF-8 JSON (graph, metadata, activation quantization)
    u32 blob count
    per blob, in graph order:
        u32 name length | name ("layer/param") | u32 rank | u32 dims[rank]
        u8 element tag (0=f32, 1=f16, 2=i8, 3=i32)
        for i8/i32 blobs: i32 axis (-1 = per tensor) | u32 n | f32 scales[n] | i32 zero point
        raw element data

The JSON is written canonically (sorted keys, no whitespace) so that
load followed by save reproduces the file byte for byte.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import FormatError
from .graph import Graph, WeightStore, param_shapes
from .qtensor import QuantizedTensor

MAGIC = b"QNET"
VERSION = 1
DTYPE_TAGS = {"f32": 0, "f16": 1, "i8": 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
ELEM_TAGS = {np.dtype("<f4"): 0, np.dtype("<f2"): 1, np.dtype("i1"): 2, np.dtype("<i4"): 3}
TAG_ELEMS = {v: k for k, v in ELEM_TAGS.items()}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


@dataclass
class Model:
    """A graph plus its parameters at one storage precision.

    ``weights`` maps layer -> param -> array (float32 or float16) or
    QuantizedTensor (i8 models).  ``activations`` holds per-layer
    (scale, zero_point) for i8 models.
    """
    graph: Graph
    weights: Dict[str, Dict[str, Union[np.ndarray, QuantizedTensor]]]
    dtype: str = "f32"
    activations: Dict[str, dict] = field(default_factory=dict)

    def float_weights(self) -> WeightStore:
        if self.dtype == "i8":
            raise FormatError("i8 models have no float weight store")
        cached = getattr(self, "_f32", None)
        if cached is None:
            cached = {l: {p: np.asarray(a, dtype=np.float32) for p, a in ps.items()}
                      for l, ps in self.weights.items()}
            self._f32 = cached
        return cached

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.dtype == "i8":
            from .quantize import forward_i8
            return forward_i8(self, x)
        from .graph import forward
        return forward(self.graph, self.float_weights(), x, mode="infer")


def _header_json(model: Model) -> dict:
    d = {"graph": model.graph.to_json(), "dtype": model.dtype}
    if model.dtype == "i8":
        d["signed"] = True
        d["activations"] = {k: {"scale": float(v["scale"]), "zero_point": int(v["zero_point"])}
                            for k, v in model.activations.items()}
    return d


def _ordered_blobs(model: Model):
    shapes = param_shapes(model.graph)
    for layer in model.graph:
        if layer.name not in shapes:
            continue
        for pname in shapes[layer.name]:
            yield f"{layer.name}/{pname}", model.weights[layer.name][pname]


def _blob_header(name: str, shape, elem: np.dtype, q: Optional[QuantizedTensor]) -> bytes:
    nb = name.encode()
    out = struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(shape))
    out += struct.pack(f"<{len(shape)}I", *shape)
    out += struct.pack("<B", ELEM_TAGS[elem])
    if q is not None:
        scales = np.asarray(q.scale, dtype="<f4")
        out += struct.pack("<iI", -1 if q.axis is None else q.axis, scales.size)
        out += scales.tobytes() + struct.pack("<i", q.zero_point)
    return out


def to_bytes(model: Model) -> bytes:
    if model.dtype not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype {model.dtype!r}")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HB", VERSION, DTYPE_TAGS[model.dtype]))
    js = canonical_json(_header_json(model))
    buf.write(struct.pack("<I", len(js)) + js)
    blobs = list(_ordered_blobs(model))
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        if isinstance(arr, QuantizedTensor):
            data = np.ascontiguousarray(arr.data, dtype=arr.data.dtype.newbyteorder("<"))
            buf.write(_blob_header(name, data.shape, data.dtype, arr))
        else:
            target = "<f2" if model.dtype == "f16" else "<f4"
            data = np.ascontiguousarray(arr, dtype=target)
            buf.write(_blob_header(name, data.shape, data.dtype, None))
        buf.write(data.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated QNET container")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a QNET container (bad magic)")
    version, tag = r.unpack("<HB")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    (jlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(jlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt graph description: {e}") from None
    graph = Graph.from_json(header["graph"])
    (count,) = r.unpack("<I")
    weights: Dict[str, dict] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        (etag,) = r.unpack("<B")
        if etag not in TAG_ELEMS:
            raise FormatError(f"blob {name!r}: unknown element tag {etag}")
        elem = TAG_ELEMS[etag]
        qparams = None
        if etag in (2, 3):
            axis, n = r.unpack("<iI")
            scales = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
            (zp,) = r.unpack("<i")
            qparams = (scales, zp, None if axis == -1 else axis)
        size = int(np.prod(shape)) * elem.itemsize
        arr = np.frombuffer(r.take(size), dtype=elem).reshape(shape).copy()
        lname, pname = name.rsplit("/", 1)
        if qparams is not None:
            arr = QuantizedTensor(arr.astype(elem.newbyteorder("=")), *qparams)
        weights.setdefault(lname, {})[pname] = arr
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last blob")
    acts = {k: {"scale": np.float32(v["scale"]), "zero_point": int(v["zero_point"])}
            for k, v in header.get("activations", {}).items()}
    return Model(graph, weights, TAG_DTYPES[tag], acts)


def atomic_write(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: Model, path) -> int:
    data = to_bytes(model)
    atomic_write(path, data)
    return len(data)


def load(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read model {path}: {e}") from None
    return from_bytes(data)


def estimate_size(graph: Graph, dtype: str) -> int:
    """Container size computed from shapes alone.

    For i8 the graph is costed as if batchnorm were already folded: every
    batchnorm disappears, its conv gains an i32 bias, and kernels carry one
    scale per output channel.  Activation tables are not included.
    """
    shapes = param_shapes(graph)
    js = canonical_json({"graph": graph.to_json(), "dtype": dtype})
    total = 4 + 3 + 4 + len(js) + 4
    elem = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}.get(dtype)
    for lname, params in shapes.items():
        kind = graph[lname].kind
        if dtype == "i8" and kind == "batchnorm":
            continue
        for pname, shape in params.items():
            hdr = 4 + len(f"{lname}/{pname}".encode()) + 4 + 4 * len(shape) + 1
            n = int(np.prod(shape))
            if dtype != "i8":
                total += hdr + n * elem.itemsize
            elif pname == "kernel":
                total += hdr + 12 + 4 * shape[-1 if kind != "depthwise" else -2] + n
            else:
                total += hdr + 12 + 4 * shape[0] + 4 * n
        if dtype == "i8" and "bias" not in params and kind in ("conv2d", "depthwise"):
            cout = params["kernel"][-1 if kind != "depthwise" else -2]
            total += 4 + len(f"{lname}/bias".encode()) + 8 + 1 + 12 + 8 * cout
    return total
