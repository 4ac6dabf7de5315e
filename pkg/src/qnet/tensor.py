"""Dense NHWC tensor kernels (forward form).

Tensors are plain ``numpy.ndarray`` objects of dtype float32.  Activations use
N,H,W,C layout; conv kernels are KH,KW,Cin,Cout, depthwise kernels KH,KW,C,1
and dense weights In,Out.  All arithmetic stays in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError

F32 = np.float32


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Build a float32 tensor, checking rank and positive dims."""
    arr = np.asarray(data, dtype=F32)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"{arr.size} values cannot fill shape {tuple(shape)}")
        arr = arr.reshape(shape)
    if arr.ndim not in (1, 2, 4):
        raise DimensionError(f"tensor rank must be 1, 2 or 4, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"tensor dims must be >= 1, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvParams:
    stride: Tuple[int, int] = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        stride = self.stride
        if isinstance(stride, int):
            stride = (stride, stride)
        stride = tuple(int(s) for s in stride)
        if len(stride) != 2 or min(stride) < 1:
            raise DimensionError(f"stride must be a positive int pair, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise DimensionError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        object.__setattr__(self, "stride", stride)


@dataclass(frozen=True)
class BatchNormParams:
    mean: np.ndarray
    variance: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        n = len(self.mean)
        for name in ("variance", "gamma", "beta"):
            if len(getattr(self, name)) != n:
                raise DimensionError(
                    f"batchnorm {name} has length {len(getattr(self, name))}, mean has {n}")
        if np.any(np.asarray(self.variance) < 0):
            raise DimensionError("batchnorm variance must be non-negative")
        if not self.epsilon >= 0:
            raise DimensionError("batchnorm epsilon must be non-negative")


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def same_pads(size: int, k: int, stride: int) -> Tuple[int, int]:
    """(before, after) padding; the odd cell goes after (bottom/right)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_geometry(h, w, kh, kw, stride, padding):
    """Output dims and (top, bottom, left, right) pads for a window op."""
    sh, sw = _pair(stride)
    oh = conv_output_size(h, kh, sh, padding)
    ow = conv_output_size(w, kw, sw, padding)
    if padding == "same":
        pads = same_pads(h, kh, sh) + same_pads(w, kw, sw)
    else:
        pads = (0, 0, 0, 0)
    return oh, ow, pads


def pad_nhwc(x: np.ndarray, pads, value=0) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)),
                  constant_values=value)


def im2col(xp: np.ndarray, kh: int, kw: int, stride, oh: int, ow: int) -> np.ndarray:
    """Patch matrix of shape (N*oh*ow, kh*kw*C) from a padded input."""
    sh, sw = _pair(stride)
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + sh * (oh - 1) + 1:sh,
                                        j:j + sw * (ow - 1) + 1:sw, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _check_output(oh, ow, x_shape, k_shape):
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"zero-sized output for input {tuple(x_shape)} and kernel {tuple(k_shape)}")


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
           stride=1, padding: str = "same") -> np.ndarray:
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise DimensionError(
            f"conv2d input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    kh, kw, cin, cout = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias {tuple(bias.shape)} does not match Cout={cout}")
    n, h, w, _ = x.shape
    oh, ow, pads = conv_geometry(h, w, kh, kw, stride, padding)
    _check_output(oh, ow, x.shape, kernel.shape)
    sh, sw = _pair(stride)
    if kh == 1 and kw == 1 and not any(pads):
        xs = x[:, ::sh, ::sw, :][:, :oh, :ow, :]
        out = xs.reshape(-1, cin) @ kernel.reshape(cin, cout)
    else:
        cols = im2col(pad_nhwc(x, pads), kh, kw, (sh, sw), oh, ow)
        out = cols @ kernel.reshape(kh * kw * cin, cout)
    out = out.reshape(n, oh, ow, cout)
    if bias is not None:
        out += bias
    return out


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride=1, padding: str = "same") -> np.ndarray:
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2] != x.shape[3] or kernel.shape[3] != 1:
        raise DimensionError(
            f"depthwise input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    kh, kw, c, _ = kernel.shape
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise bias {tuple(bias.shape)} does not match C={c}")
    n, h, w, _ = x.shape
    oh, ow, pads = conv_geometry(h, w, kh, kw, stride, padding)
    _check_output(oh, ow, x.shape, kernel.shape)
    sh, sw = _pair(stride)
    xp = pad_nhwc(x, pads)
    out = np.zeros((n, oh, ow, c), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] * kernel[i, j, :, 0]
    if bias is not None:
        out += bias
    return out


def dense(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"dense bias {tuple(bias.shape)} does not match Out={weight.shape[1]}")
        out += bias
    return out


def batch_norm_inference(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    if x.shape[-1] != len(p.mean):
        raise DimensionError(
            f"batchnorm over {x.shape[-1]} channels given {len(p.mean)} parameters")
    inv = (np.asarray(p.gamma, F32) / np.sqrt(np.asarray(p.variance, F32) + F32(p.epsilon)))
    return (x - np.asarray(p.mean, F32)) * inv + np.asarray(p.beta, F32)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, F32(0))
    if kind == "relu6":
        return np.clip(x, F32(0), F32(6))
    if kind == "softmax":
        return softmax(x)
    raise DimensionError(f"unknown activation {kind!r}")


def pool(x: np.ndarray, kind: str, window=2, stride=None, padding: str = "valid") -> np.ndarray:
    """Max pooling or global average pooling to N x C.

    Max pooling uses valid windows by default; ``padding="same"`` pads with
    -inf so border windows only see real cells.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool expects an N,H,W,C tensor, got {tuple(x.shape)}")
    if kind == "global_avg":
        return x.mean(axis=(1, 2), dtype=np.float64 if x.dtype == np.float64 else F32)
    if kind != "max":
        raise DimensionError(f"unknown pool kind {kind!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    n, h, w, c = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"pool window {(kh, kw)} larger than input {tuple(x.shape)}")
    oh, ow, pads = conv_geometry(h, w, kh, kw, (sh, sw), padding)
    x = pad_nhwc(x, pads, value=-np.inf)
    out = np.full((n, oh, ow, c), -np.inf, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            np.maximum(out, x[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :], out=out)
    return out


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add tensors of shape {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b
