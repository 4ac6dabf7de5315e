"""Affine-quantized integer tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError

QMIN, QMAX = -128, 127


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes with ``real = scale * (code - zero_point)``.

    ``scale`` is a scalar, or a vector along ``axis`` for per-channel
    quantization.  ``data`` is int8 for weights/activations and int32 for
    biases.
    """
    data: np.ndarray
    scale: np.ndarray
    zero_point: int = 0
    axis: Optional[int] = None

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float32))
        if self.axis is None:
            if scale.size != 1:
                raise DimensionError(f"per-tensor quantization needs one scale, got {scale.size}")
        else:
            axis = self.axis % self.data.ndim
            object.__setattr__(self, "axis", axis)
            if scale.size != self.data.shape[axis]:
                raise DimensionError(
                    f"{scale.size} scales for axis {axis} of shape {self.data.shape}")
        if np.any(scale <= 0):
            raise DimensionError("quantization scales must be positive")
        if not QMIN <= self.zero_point <= QMAX:
            raise DimensionError(f"zero point {self.zero_point} outside [{QMIN}, {QMAX}]")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def shape(self):
        return self.data.shape

    def broadcast_scale(self) -> np.ndarray:
        if self.axis is None:
            return self.scale.reshape(())
        shape = [1] * self.data.ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.data.astype(np.float32) - np.float32(q.zero_point)
    return (codes * q.broadcast_scale()).astype(np.float32)


def quantize(x: np.ndarray, scale, zero_point: int = 0, axis: Optional[int] = None,
             dtype=np.int8) -> QuantizedTensor:
    """Affine-quantize ``x`` with round-half-away-from-zero and saturation."""
    x = np.asarray(x, dtype=np.float32)
    scale = np.atleast_1d(np.asarray(scale, dtype=np.float32))
    if axis is not None:
        shape = [1] * x.ndim
        shape[axis] = -1
        s = scale.reshape(shape)
    else:
        s = scale.reshape(())
    info = np.iinfo(dtype)
    codes = round_half_away(x.astype(np.float64) / s.astype(np.float64)) + zero_point
    codes = np.clip(codes, info.min, info.max).astype(dtype)
    return QuantizedTensor(codes, scale, zero_point, axis)


def symmetric_scales(x: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
    """Scale mapping max |x| (per channel along ``axis``) onto code 127."""
    x = np.asarray(x, dtype=np.float32)
    if axis is None:
        m = np.abs(x).max(initial=0.0)
    else:
        other = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
        m = np.abs(x).max(axis=other, initial=0.0)
    m = np.atleast_1d(np.asarray(m, dtype=np.float32))
    return np.where(m > 0, m / np.float32(QMAX), np.float32(1.0)).astype(np.float32)


def affine_params(lo: float, hi: float) -> tuple:
    """(scale, zero_point) covering [lo, hi] with 0 exactly representable."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (QMAX - QMIN)
    if scale <= 0:
        scale = 1.0
    zp = int(np.clip(round_half_away(np.float64(QMIN - lo / scale)), QMIN, QMAX))
    return np.float32(scale), zp
