"""Tensors and affine int8 quantization arithmetic.

All rounding in this package is round-half-away-from-zero. Activations are
channels-last ``(N, H, W, C)``; convolution weights are ``(O, KH, KW, I)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

QMIN = -128
QMAX = 127
INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

# min == max calibration ranges are widened by this much
DEGENERATE_RANGE_WIDTH = 1e-5


class QuantError(ValueError):
    """Invalid tensor, quantization parameters or shape/axis mismatch."""


class DType(enum.Enum):
    F32 = "f32"
    I8 = "i8"
    I32 = "i32"

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY_DTYPES[self]


_NUMPY_DTYPES = {
    DType.F32: np.dtype(np.float32),
    DType.I8: np.dtype(np.int8),
    DType.I32: np.dtype(np.int32),
}


def round_half_away(x):
    """Round to nearest integer, ties away from zero (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Affine scheme ``real = scale * (code - zero_point)``.

    ``axis`` is None for per-tensor parameters, otherwise the index of the
    quantized axis.
    """

    scales: tuple[float, ...]
    zero_points: tuple[int, ...]
    axis: Optional[int] = None

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        zps = tuple(int(z) for z in self.zero_points)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)
        if len(scales) == 0 or len(scales) != len(zps):
            raise QuantError("scales and zero_points must be non-empty and equal length")
        if self.axis is None and len(scales) != 1:
            raise QuantError("per-tensor params need exactly one scale")
        for s in scales:
            if not (math.isfinite(s) and s > 0):
                raise QuantError(f"scale must be positive and finite, got {s}")
        for z in zps:
            if not QMIN <= z <= QMAX:
                raise QuantError(f"zero point {z} outside [{QMIN}, {QMAX}]")

    @classmethod
    def per_tensor(cls, scale: float, zero_point: int = 0) -> "QuantParams":
        return cls((scale,), (zero_point,), None)

    @classmethod
    def per_channel(cls, scales: Sequence[float], axis: int) -> "QuantParams":
        return cls(tuple(scales), (0,) * len(scales), axis)

    @property
    def is_per_tensor(self) -> bool:
        return self.axis is None

    @property
    def is_symmetric(self) -> bool:
        return all(z == 0 for z in self.zero_points)

    @property
    def scale(self) -> float:
        if not self.is_per_tensor:
            raise QuantError("per-channel params have no single scale")
        return self.scales[0]

    @property
    def zero_point(self) -> int:
        if not self.is_per_tensor:
            raise QuantError("per-channel params have no single zero point")
        return self.zero_points[0]

    def check_shape(self, shape: Sequence[int]) -> None:
        if self.axis is None:
            return
        if not -len(shape) <= self.axis < len(shape):
            raise QuantError(f"quantization axis {self.axis} out of range for shape {tuple(shape)}")
        if shape[self.axis] != len(self.scales):
            raise QuantError(
                f"axis {self.axis} has size {shape[self.axis]} but params carry {len(self.scales)} scales"
            )

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Scales (float64) and zero points (int64) shaped to broadcast against a rank-``ndim`` array."""
        s = np.asarray(self.scales, dtype=np.float64)
        z = np.asarray(self.zero_points, dtype=np.int64)
        if self.axis is None:
            return s.reshape(()), z.reshape(())
        shape = [1] * ndim
        shape[self.axis] = len(self.scales)
        return s.reshape(shape), z.reshape(shape)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable shaped buffer; I8 tensors carry quantization params, others must not."""

    data: np.ndarray
    dtype: DType
    qparams: Optional[QuantParams] = None
    shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=self.dtype.numpy)
        if arr.ndim == 0 or arr.ndim > 4:
            raise QuantError(f"tensor rank must be 1..4, got {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise QuantError(f"every dim must be >= 1, got {arr.shape}")
        if arr is self.data:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", tuple(int(d) for d in arr.shape))
        if self.dtype is DType.I8:
            if self.qparams is None:
                raise QuantError("I8 tensor requires quantization params")
            self.qparams.check_shape(self.shape)
        elif self.qparams is not None:
            raise QuantError(f"{self.dtype.name} tensor must not carry quantization params")

    @classmethod
    def f32(cls, data) -> "Tensor":
        return cls(np.asarray(data, dtype=np.float32), DType.F32)

    @classmethod
    def i32(cls, data) -> "Tensor":
        return cls(np.asarray(data, dtype=np.int32), DType.I32)

    @classmethod
    def i8(cls, data, qparams: QuantParams) -> "Tensor":
        return cls(np.asarray(data, dtype=np.int8), DType.I8, qparams)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: DType = DType.F32, qparams=None) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype.numpy), dtype, qparams)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def same_as(self, other: "Tensor") -> bool:
        """Bit-identical comparison: dtype, shape, qparams and raw bytes."""
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.qparams == other.qparams
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        q = f", qparams={self.qparams}" if self.qparams is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{q})"


def quantize(t: Tensor, qp: QuantParams) -> Tensor:
    if t.dtype is not DType.F32:
        raise QuantError(f"quantize expects an F32 tensor, got {t.dtype.name}")
    qp.check_shape(t.shape)
    s, z = qp.broadcast(t.data.ndim)
    q = round_half_away(t.data.astype(np.float64) / s) + z
    return Tensor(np.clip(q, QMIN, QMAX).astype(np.int8), DType.I8, qp)


def dequantize(t: Tensor) -> Tensor:
    if t.dtype is not DType.I8 or t.qparams is None:
        raise QuantError("dequantize expects an I8 tensor with quantization params")
    s, z = t.qparams.broadcast(t.data.ndim)
    return Tensor((s * (t.data.astype(np.int64) - z)).astype(np.float32), DType.F32)


def _f32(x: float) -> float:
    # scales are stored as float32 in the model container
    return float(np.float32(x))


def compute_quant_params(min_val: float, max_val: float, symmetric: bool = False) -> QuantParams:
    """Per-tensor params covering ``[min_val, max_val]``.

    The asymmetric range is first extended to include 0.0, which is then
    exactly representable by the zero point.
    """
    min_val, max_val = float(min_val), float(max_val)
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise QuantError(f"calibration range must be finite, got [{min_val}, {max_val}]")
    if min_val > max_val:
        raise QuantError(f"min {min_val} > max {max_val}")
    if symmetric:
        bound = max(abs(min_val), abs(max_val), DEGENERATE_RANGE_WIDTH)
        return QuantParams.per_tensor(_f32(bound / QMAX), 0)
    lo, hi = min(min_val, 0.0), max(max_val, 0.0)
    # min == max (and any narrower-than-representable range) is widened upward
    if hi - lo < DEGENERATE_RANGE_WIDTH:
        hi = lo + DEGENERATE_RANGE_WIDTH
    scale = _f32((hi - lo) / (QMAX - QMIN))
    zp = int(round_half_away(QMIN - lo / scale))
    return QuantParams.per_tensor(scale, int(np.clip(zp, QMIN, QMAX)))


def symmetric_per_channel_params(w: np.ndarray, axis: int) -> QuantParams:
    """Symmetric weight params with one scale per slice along ``axis``."""
    w = np.asarray(w, dtype=np.float64)
    axis = axis % w.ndim
    other = tuple(i for i in range(w.ndim) if i != axis)
    bound = np.max(np.abs(w), axis=other) if other else np.abs(w)
    bound = np.maximum(bound, DEGENERATE_RANGE_WIDTH)
    return QuantParams.per_channel([_f32(b / QMAX) for b in bound], axis)


def compute_fixed_multiplier(real_multiplier: float) -> tuple[int, int]:
    """Split ``real_multiplier`` into ``mantissa * 2**(shift - 31)``, mantissa in [2^30, 2^31)."""
    m = float(real_multiplier)
    if not (math.isfinite(m) and 0.0 < m < 2.0**31):
        raise QuantError(f"multiplier must be in (0, 2^31), got {real_multiplier}")
    frac, exp = math.frexp(m)
    mantissa = int(round_half_away(frac * 2.0**31))
    if mantissa == 2**31:
        mantissa //= 2
        exp += 1
    return mantissa, exp


def fixed_multipliers(real_multipliers) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of :func:`compute_fixed_multiplier` (int64 arrays)."""
    pairs = [compute_fixed_multiplier(m) for m in np.ravel(real_multipliers)]
    mant = np.array([p[0] for p in pairs], dtype=np.int64)
    shift = np.array([p[1] for p in pairs], dtype=np.int64)
    return mant, shift


def rescale_i32(acc, mantissa, shift):
    """``round(acc * mantissa * 2**(shift-31))`` in integer arithmetic, saturated to int32.

    Accepts scalars or arrays; ``mantissa``/``shift`` broadcast against ``acc``.
    """
    acc = np.clip(np.asarray(acc, dtype=np.int64), INT32_MIN, INT32_MAX)
    mantissa = np.asarray(mantissa, dtype=np.int64)
    rshift = 31 - np.asarray(shift, dtype=np.int64)
    prod = acc * mantissa  # |prod| < 2^62
    sign = np.where(prod < 0, -1, 1)
    mag = np.abs(prod)

    if np.any(rshift < 0):
        raise QuantError("shift out of range; use compute_fixed_multiplier")
    rs = np.clip(rshift, 1, 62)
    down = (mag + (np.int64(1) << (rs - 1))) >> rs
    out = sign * np.where(rshift == 0, mag, np.where(rshift > 62, 0, down))
    out = np.clip(out, INT32_MIN, INT32_MAX)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def quantize_weights(w: Tensor, axis: int = 0) -> Tensor:
    """Symmetric per-channel int8 weights along the output-channel ``axis``."""
    return quantize(w, symmetric_per_channel_params(w.data, axis))


def quantize_bias(b: Tensor, input_scale: float, weight_qp: QuantParams) -> Tensor:
    """int32 bias at scale ``input_scale * weight_scale[c]``."""
    if b.dtype is not DType.F32 or len(b.shape) != 1:
        raise QuantError("bias must be a rank-1 F32 tensor")
    ws = np.asarray(weight_qp.scales, dtype=np.float64)
    if ws.size not in (1, b.shape[0]):
        raise QuantError(f"bias has {b.shape[0]} entries but weights carry {ws.size} scales")
    q = round_half_away(b.data.astype(np.float64) / (float(input_scale) * ws))
    return Tensor.i32(np.clip(q, INT32_MIN, INT32_MAX))
