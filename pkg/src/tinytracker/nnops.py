"""Operator kernels: a float reference path and an int8 path per operator.

Every public kernel dispatches on the input dtype. F32 inputs run the float
reference (accumulated in float64, returned as float32). I8 inputs run the
integer path: int32 accumulation, fixed-point requantization to the output
params, saturation to the activation's code range.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .qtensor import (
    INT32_MAX,
    INT32_MIN,
    QMAX,
    QMIN,
    DType,
    QuantError,
    QuantParams,
    Tensor,
    dequantize,
    fixed_multipliers,
    quantize,
    rescale_i32,
    round_half_away,
)


class Padding(enum.Enum):
    SAME = "same"
    VALID = "valid"


class Activation(enum.Enum):
    NONE = "none"
    RELU = "relu"
    RELU6 = "relu6"


# float-kernel instrumentation ------------------------------------------------

_float_counter: contextvars.ContextVar = contextvars.ContextVar("_float_counter", default=None)


class FloatOpCounter:
    def __init__(self):
        self.count = 0
        self.kinds: list[str] = []


@contextlib.contextmanager
def count_float_kernels():
    """Count float-path kernel invocations in the current context."""
    counter = FloatOpCounter()
    token = _float_counter.set(counter)
    try:
        yield counter
    finally:
        _float_counter.reset(token)


def _note_float(kind: str) -> None:
    counter = _float_counter.get()
    if counter is not None:
        counter.count += 1
        counter.kinds.append(kind)


# helpers ---------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return -(-size // stride)
    out = (size - kernel) // stride + 1
    if out < 1:
        raise QuantError(f"kernel {kernel} larger than input {size} with valid padding")
    return out


def _pad_amounts(size: int, kernel: int, stride: int, padding: Padding) -> tuple[int, int]:
    if padding is Padding.VALID:
        return 0, 0
    out = conv_output_size(size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _patches(x: np.ndarray, kh: int, kw: int, stride, padding: Padding, pad_value) -> np.ndarray:
    """Strided windows of an NHWC array, shape (N, OH, OW, C, KH, KW)."""
    sh, sw = stride
    ph = _pad_amounts(x.shape[1], kh, sh, padding)
    pw = _pad_amounts(x.shape[2], kw, sw, padding)
    if any(ph) or any(pw):
        x = np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=pad_value)
    if x.shape[1] < kh or x.shape[2] < kw:
        raise QuantError(f"kernel {kh}x{kw} larger than padded input {x.shape[1]}x{x.shape[2]}")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::sh, ::sw]


def _require_rank(t: Tensor, rank: int, what: str) -> None:
    if len(t.shape) != rank:
        raise QuantError(f"{what} must be rank {rank}, got shape {t.shape}")


def _require_qparams(*tensors: Optional[Tensor]) -> None:
    for t in tensors:
        if t is not None and t.dtype is DType.I8 and t.qparams is None:
            raise QuantError("int8 path needs quantization params")


def _per_tensor(qp: Optional[QuantParams], what: str) -> QuantParams:
    if qp is None:
        raise QuantError(f"int8 path requires {what} quantization params")
    if not qp.is_per_tensor:
        raise QuantError(f"{what} must be quantized per-tensor")
    return qp


def _float_activation(y: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(y, 0.0)
    if act is Activation.RELU6:
        return np.clip(y, 0.0, 6.0)
    return y


def activation_code_range(act: Activation, qp: QuantParams) -> tuple[int, int]:
    """Clamp bounds in code space for a fused activation."""
    lo, hi = QMIN, QMAX
    z, s = qp.zero_point, qp.scale
    if act in (Activation.RELU, Activation.RELU6):
        lo = max(lo, z)
    if act is Activation.RELU6:
        hi = min(hi, z + int(round_half_away(6.0 / s)))
    return lo, hi


def _weight_scales(w: Tensor, channels: int) -> np.ndarray:
    qp = w.qparams
    if qp is None or not qp.is_symmetric:
        raise QuantError("int8 weights must be symmetric (zero points all 0)")
    s = np.asarray(qp.scales, dtype=np.float64)
    if qp.is_per_tensor:
        return np.full(channels, s[0])
    if len(s) != channels:
        raise QuantError(f"weight params carry {len(s)} scales for {channels} output channels")
    return s


def requantize(acc: np.ndarray, real_multipliers, out_qp: QuantParams, act: Activation) -> np.ndarray:
    """int32 accumulators (last axis = channel) -> int8 codes."""
    mant, shift = fixed_multipliers(real_multipliers)
    if mant.size == 1:
        mant, shift = mant.reshape(()), shift.reshape(())
    y = rescale_i32(acc, mant, shift) + out_qp.zero_point
    lo, hi = activation_code_range(act, out_qp)
    return np.clip(y, lo, hi).astype(np.int8)


def _bias_i32(b: Optional[Tensor], channels: int) -> np.ndarray:
    if b is None:
        return np.zeros(channels, dtype=np.int64)
    if b.dtype is not DType.I32:
        raise QuantError(f"int8 path needs an I32 bias, got {b.dtype.name}")
    if b.shape != (channels,):
        raise QuantError(f"bias shape {b.shape} != ({channels},)")
    return b.data.astype(np.int64)


def _bias_f(b: Optional[Tensor], channels: int) -> np.ndarray:
    if b is None:
        return np.zeros(channels)
    if b.dtype is not DType.F32:
        raise QuantError(f"float path needs an F32 bias, got {b.dtype.name}")
    if b.shape != (channels,):
        raise QuantError(f"bias shape {b.shape} != ({channels},)")
    return b.data.astype(np.float64)


def _saturate_acc(acc: np.ndarray) -> np.ndarray:
    return np.clip(acc, INT32_MIN, INT32_MAX)


# convolution -----------------------------------------------------------------


def _check_conv(x: Tensor, w: Tensor, groups: int) -> None:
    _require_rank(x, 4, "conv input")
    _require_rank(w, 4, "conv weights")
    cin, cout = x.shape[3], w.shape[0]
    if groups < 1 or cin % groups or cout % groups:
        raise QuantError(f"channels in={cin} out={cout} not divisible by groups={groups}")
    if w.shape[3] != cin // groups:
        raise QuantError(f"weight in-channels {w.shape[3]} != input channels / groups = {cin // groups}")


def _conv_core(x: np.ndarray, w: np.ndarray, stride, padding: Padding, groups: int, pad_value) -> np.ndarray:
    # x: NHWC, w: (O, KH, KW, I/groups); integer or float arrays of the same kind
    cout, kh, kw, cg = w.shape
    og = cout // groups
    if kh == kw == 1:  # 1x1 never pads under either scheme
        xs = x[:, :: stride[0], :: stride[1], :]
        parts = [
            xs[..., g * cg : (g + 1) * cg] @ w[g * og : (g + 1) * og, 0, 0, :].T for g in range(groups)
        ]
        return np.concatenate(parts, axis=-1) if groups > 1 else parts[0]
    win = _patches(x, kh, kw, stride, padding, pad_value)
    parts = []
    for g in range(groups):
        wg = w[g * og : (g + 1) * og]
        parts.append(np.tensordot(win[:, :, :, g * cg : (g + 1) * cg], wg, axes=([3, 4, 5], [3, 1, 2])))
    return np.concatenate(parts, axis=-1) if groups > 1 else parts[0]


def conv2d_acc(x: Tensor, w: Tensor, b: Optional[Tensor], stride=(1, 1), padding=Padding.VALID, groups: int = 1) -> np.ndarray:
    """int32 accumulators ``sum((q_in - z_in) * q_w) + bias`` (returned as int64 array)."""
    _check_conv(x, w, groups)
    in_qp = _per_tensor(x.qparams, "input")
    z = in_qp.zero_point
    xi = x.data.astype(np.int64) - z
    acc = _conv_core(xi, w.data.astype(np.int64), _pair(stride), padding, groups, 0)
    return _saturate_acc(acc + _bias_i32(b, w.shape[0]))


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=(1, 1),
    padding: Padding = Padding.VALID,
    groups: int = 1,
    act: Activation = Activation.NONE,
    out_qparams: Optional[QuantParams] = None,
) -> Tensor:
    stride = _pair(stride)
    if x.dtype is DType.F32:
        _check_conv(x, w, groups)
        _note_float("conv2d")
        y = _conv_core(x.data.astype(np.float64), w.data.astype(np.float64), stride, padding, groups, 0.0)
        y = _float_activation(y + _bias_f(b, w.shape[0]), act)
        return Tensor.f32(y)
    if x.dtype is not DType.I8 or w.dtype is not DType.I8:
        raise QuantError("conv2d needs F32 or I8 input with matching weights")
    out_qp = _per_tensor(out_qparams, "output")
    acc = conv2d_acc(x, w, b, stride, padding, groups)
    mult = x.qparams.scale * _weight_scales(w, w.shape[0]) / out_qp.scale
    return Tensor.i8(requantize(acc, mult, out_qp, act), out_qp)


def _check_depthwise(x: Tensor, w: Tensor) -> None:
    _require_rank(x, 4, "depthwise input")
    _require_rank(w, 4, "depthwise weights")
    if w.shape[0] != 1 or w.shape[3] != x.shape[3]:
        raise QuantError(f"depthwise weights {w.shape} do not match {x.shape[3]} channels (multiplier 1)")


def _depthwise_core(x: np.ndarray, w: np.ndarray, stride, padding: Padding, pad_value) -> np.ndarray:
    _, kh, kw, _ = w.shape
    win = _patches(x, kh, kw, stride, padding, pad_value)
    return np.einsum("nhwcij,ijc->nhwc", win, w[0])


def depthwise_conv2d_acc(x: Tensor, w: Tensor, b: Optional[Tensor], stride=(1, 1), padding=Padding.VALID) -> np.ndarray:
    _check_depthwise(x, w)
    z = _per_tensor(x.qparams, "input").zero_point
    acc = _depthwise_core(x.data.astype(np.int64) - z, w.data.astype(np.int64), _pair(stride), padding, 0)
    return _saturate_acc(acc + _bias_i32(b, w.shape[3]))


def depthwise_conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=(1, 1),
    padding: Padding = Padding.VALID,
    act: Activation = Activation.NONE,
    out_qparams: Optional[QuantParams] = None,
) -> Tensor:
    """Depthwise convolution, weight layout ``(1, KH, KW, C)``."""
    stride = _pair(stride)
    if x.dtype is DType.F32:
        _check_depthwise(x, w)
        _note_float("depthwise_conv2d")
        y = _depthwise_core(x.data.astype(np.float64), w.data.astype(np.float64), stride, padding, 0.0)
        return Tensor.f32(_float_activation(y + _bias_f(b, w.shape[3]), act))
    if x.dtype is not DType.I8 or w.dtype is not DType.I8:
        raise QuantError("depthwise_conv2d needs F32 or I8 input with matching weights")
    out_qp = _per_tensor(out_qparams, "output")
    if w.qparams.axis not in (None, 3, -1):
        raise QuantError("depthwise weights must be quantized along the channel axis")
    acc = depthwise_conv2d_acc(x, w, b, stride, padding)
    mult = x.qparams.scale * _weight_scales(w, w.shape[3]) / out_qp.scale
    return Tensor.i8(requantize(acc, mult, out_qp, act), out_qp)


# fully connected -------------------------------------------------------------


def _flatten(x: Tensor, w: Tensor) -> np.ndarray:
    _require_rank(w, 2, "fc weights")
    flat = x.data.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise QuantError(f"fc input has {flat.shape[1]} features, weights expect {w.shape[1]}")
    return flat


def fully_connected_acc(x: Tensor, w: Tensor, b: Optional[Tensor]) -> np.ndarray:
    flat = _flatten(x, w)
    z = _per_tensor(x.qparams, "input").zero_point
    acc = (flat.astype(np.int64) - z) @ w.data.astype(np.int64).T
    return _saturate_acc(acc + _bias_i32(b, w.shape[0]))


def fully_connected(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    act: Activation = Activation.NONE,
    out_qparams: Optional[QuantParams] = None,
) -> Tensor:
    """``(N, ...)`` input flattened to ``(N, F)``; weights ``(O, F)``; output ``(N, O)``."""
    if x.dtype is DType.F32:
        flat = _flatten(x, w)
        _note_float("fully_connected")
        y = flat.astype(np.float64) @ w.data.astype(np.float64).T + _bias_f(b, w.shape[0])
        return Tensor.f32(_float_activation(y, act))
    if x.dtype is not DType.I8 or w.dtype is not DType.I8:
        raise QuantError("fully_connected needs F32 or I8 input with matching weights")
    out_qp = _per_tensor(out_qparams, "output")
    acc = fully_connected_acc(x, w, b)
    mult = x.qparams.scale * _weight_scales(w, w.shape[0]) / out_qp.scale
    return Tensor.i8(requantize(acc, mult, out_qp, act), out_qp)


# pooling and activations -----------------------------------------------------


def round_div(num: np.ndarray, den: int) -> np.ndarray:
    """Integer division rounding half away from zero."""
    num = np.asarray(num, dtype=np.int64)
    mag = (np.abs(num) + den // 2) // den
    return np.where(num < 0, -mag, mag)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, ``(N, H, W, C) -> (N, 1, 1, C)``; int8 keeps the input params."""
    _require_rank(x, 4, "pool input")
    n, h, w, c = x.shape
    if x.dtype is DType.F32:
        _note_float("global_avg_pool")
        return Tensor.f32(x.data.astype(np.float64).mean(axis=(1, 2), keepdims=True))
    _require_qparams(x)
    _per_tensor(x.qparams, "input")
    total = x.data.astype(np.int64).sum(axis=(1, 2), keepdims=True)
    return Tensor.i8(np.clip(round_div(total, h * w), QMIN, QMAX), x.qparams)


def _hard_sigmoid_f(v: np.ndarray) -> np.ndarray:
    return np.clip(v + 3.0, 0.0, 6.0) / 6.0


def _hard_swish_f(v: np.ndarray) -> np.ndarray:
    return v * np.clip(v + 3.0, 0.0, 6.0) / 6.0


def activation_lut(kind: str, in_qp: QuantParams, out_qp: QuantParams) -> Tensor:
    """256-entry table ``lut[q + 128] = quantize(f(dequantize(q)))``."""
    fn = {"hard_swish": hard_swish, "hard_sigmoid": hard_sigmoid}[kind]
    codes = Tensor.i8(np.arange(QMIN, QMAX + 1, dtype=np.int16), _per_tensor(in_qp, "input"))
    real = fn(dequantize(codes))
    return quantize(real, _per_tensor(out_qp, "output"))


def apply_lut(x: Tensor, lut: Tensor) -> Tensor:
    if lut.dtype is not DType.I8 or lut.shape != (256,):
        raise QuantError("activation table must be an I8 tensor of 256 entries")
    _per_tensor(x.qparams, "input")
    idx = x.data.astype(np.int64) - QMIN
    return Tensor.i8(lut.data[idx], lut.qparams)


def _pointwise(kind: str, f: Callable, x: Tensor, lut: Optional[Tensor], out_qparams) -> Tensor:
    if x.dtype is DType.F32:
        _note_float(kind)
        return Tensor.f32(f(x.data.astype(np.float64)))
    if x.dtype is not DType.I8:
        raise QuantError(f"{kind} needs F32 or I8 input")
    if lut is None:
        if out_qparams is None:
            raise QuantError(f"int8 {kind} requires input and output quantization params")
        lut = activation_lut(kind, x.qparams, out_qparams)
    return apply_lut(x, lut)


def hard_swish(x: Tensor, lut: Optional[Tensor] = None, out_qparams: Optional[QuantParams] = None) -> Tensor:
    return _pointwise("hard_swish", _hard_swish_f, x, lut, out_qparams)


def hard_sigmoid(x: Tensor, lut: Optional[Tensor] = None, out_qparams: Optional[QuantParams] = None) -> Tensor:
    return _pointwise("hard_sigmoid", _hard_sigmoid_f, x, lut, out_qparams)


# elementwise -----------------------------------------------------------------

ADD_LEFT_SHIFT = 20


def elementwise_add(a: Tensor, b: Tensor, out_qparams: Optional[QuantParams] = None) -> Tensor:
    if a.shape != b.shape:
        raise QuantError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    if a.dtype is DType.F32 and b.dtype is DType.F32:
        _note_float("add")
        return Tensor.f32(a.data.astype(np.float64) + b.data.astype(np.float64))
    if a.dtype is not DType.I8 or b.dtype is not DType.I8:
        raise QuantError("add operands must both be F32 or both I8")
    qa, qb = _per_tensor(a.qparams, "lhs"), _per_tensor(b.qparams, "rhs")
    out_qp = _per_tensor(out_qparams, "output")
    # both operands brought to a shared fine scale twice_max / 2^20, summed, then rescaled
    twice_max = 2.0 * max(qa.scale, qb.scale)
    ia = (a.data.astype(np.int64) - qa.zero_point) << ADD_LEFT_SHIFT
    ib = (b.data.astype(np.int64) - qb.zero_point) << ADD_LEFT_SHIFT
    ra = rescale_i32(ia, *fixed_multipliers(qa.scale / twice_max))
    rb = rescale_i32(ib, *fixed_multipliers(qb.scale / twice_max))
    mult = twice_max / (2**ADD_LEFT_SHIFT * out_qp.scale)
    return Tensor.i8(requantize(ra + rb, mult, out_qp, Activation.NONE), out_qp)


def elementwise_mul_broadcast_channels(a: Tensor, scale: Tensor, out_qparams: Optional[QuantParams] = None) -> Tensor:
    """``a * scale`` with ``scale`` shaped ``(N or 1, 1, 1, C)``."""
    _require_rank(a, 4, "mul input")
    _require_rank(scale, 4, "channel scale")
    if scale.shape[1:3] != (1, 1) or scale.shape[3] != a.shape[3] or scale.shape[0] not in (1, a.shape[0]):
        raise QuantError(f"channel scale {scale.shape} does not broadcast to {a.shape}")
    if a.dtype is DType.F32 and scale.dtype is DType.F32:
        _note_float("mul")
        return Tensor.f32(a.data.astype(np.float64) * scale.data.astype(np.float64))
    if a.dtype is not DType.I8 or scale.dtype is not DType.I8:
        raise QuantError("mul operands must both be F32 or both I8")
    qa, qs = _per_tensor(a.qparams, "lhs"), _per_tensor(scale.qparams, "rhs")
    out_qp = _per_tensor(out_qparams, "output")
    prod = (a.data.astype(np.int64) - qa.zero_point) * (scale.data.astype(np.int64) - qs.zero_point)
    mult = qa.scale * qs.scale / out_qp.scale
    return Tensor.i8(requantize(prod, mult, out_qp, Activation.NONE), out_qp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise QuantError("concat needs at least one tensor")
    for p in parts:
        if p.dtype is not DType.F32:
            raise QuantError("concat_channels is float-only")
        _require_rank(p, 4, "concat operand")
        if p.shape[:3] != parts[0].shape[:3]:
            raise QuantError(f"concat operands differ in batch/spatial dims: {p.shape} vs {parts[0].shape}")
    return Tensor.f32(np.concatenate([p.data for p in parts], axis=3))


# batch-norm folding ----------------------------------------------------------


def fold_batchnorm(w: Tensor, b: Optional[Tensor], gamma, beta, mean, var, eps: float = 1e-3, axis: int = 0) -> tuple[Tensor, Tensor]:
    """Fold inference batch-norm into the preceding conv/FC.

    ``axis`` is the output-channel axis of ``w`` (0 for conv/FC, 3 for depthwise).
    """
    gamma, beta, mean, var = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (gamma, beta, mean, var))
    channels = w.shape[axis]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if v.shape != (channels,):
            raise QuantError(f"batch-norm {name} has {v.size} entries, expected {channels}")
    if np.any(var < 0):
        raise QuantError("batch-norm variance must be non-negative")
    if not eps > 0 and np.any(var == 0):
        raise QuantError("eps must be positive when a variance is zero")
    factor = gamma / np.sqrt(var + eps)
    bshape = [1] * len(w.shape)
    bshape[axis] = channels
    w_new = w.data.astype(np.float64) * factor.reshape(bshape)
    b_old = np.zeros(channels) if b is None else b.data.astype(np.float64)
    b_new = (b_old - mean) * factor + beta
    return Tensor.f32(w_new), Tensor.f32(b_new)
