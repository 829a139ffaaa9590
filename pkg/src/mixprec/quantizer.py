"""Range observation, quantization parameters and fixed-point rescaling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .dtypes import DataType, derive_wide_types
from .tensor import Tensor


class QuantMode(enum.Enum):
    PASSIVE = "PASSIVE"
    OBSERVE = "OBSERVE"
    PSEUDO = "PSEUDO"
    QUANTIZED = "QUANTIZED"


@dataclass(frozen=True)
class QuantizerValues:
    f_min: float
    f_max: float
    scale: float
    zero: int
    one: float
    i_min: int
    i_max: int

    @property
    def dtype(self) -> DataType:
        return DataType.INT8Q if self.i_max == 255 else DataType.INT16Q


def estimate_params(f_min: float, f_max: float, dtype) -> QuantizerValues:
    """Scale, zero-point and one-point for the float range [f_min, f_max].

    Computed in double precision. The zero-point is rounded half-to-even and
    clamped into the integer range, so a range that excludes zero pins it to
    one of the bounds.
    """
    dtype = DataType.parse(dtype)
    if not dtype.is_quantized:
        raise ValueError(f"{dtype.value} is not a quantized type")
    f_min, f_max = float(f_min), float(f_max)
    if not (math.isfinite(f_min) and math.isfinite(f_max)) or f_max <= f_min:
        raise ValueError(f"degenerate range [{f_min}, {f_max}]")
    i_min, i_max = dtype.integer_bounds
    scale = (f_max - f_min) / (i_max - i_min)
    zero = min(max(round(i_min - f_min / scale), i_min), i_max)
    return QuantizerValues(f_min, f_max, scale, int(zero), 1.0 / scale + zero, i_min, i_max)


def quantize_array(x, qv: QuantizerValues, dtype=None) -> np.ndarray:
    dtype = qv.dtype if dtype is None else DataType.parse(dtype)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        q = np.rint(x / qv.scale) + qv.zero
    q = np.where(np.isnan(q), qv.zero, q)
    q = np.clip(q, qv.i_min, qv.i_max)
    return q.astype(dtype.storage)


def dequantize_array(q, qv: QuantizerValues) -> np.ndarray:
    q = np.asarray(q).astype(np.int64)
    return (qv.scale * (q - qv.zero)).astype(np.float32)


def quantize(t: Tensor, qv: QuantizerValues, dtype=None) -> Tensor:
    dtype = qv.dtype if dtype is None else DataType.parse(dtype)
    return Tensor(dtype, quantize_array(t.to_float(), qv, dtype), qv)


def dequantize(t: Tensor, qv: Optional[QuantizerValues] = None) -> Tensor:
    if not t.dtype.is_quantized:
        raise TypeError("dequantize needs a quantized tensor")
    qv = t.qvals if qv is None else qv
    return Tensor(DataType.FP32, dequantize_array(t.data, qv))


def pseudo_quantize(t: Tensor, qv: QuantizerValues, dtype=None) -> Tensor:
    """Bin float values onto the quantized grid, keeping FP32 storage."""
    values = t.to_float()
    return Tensor(DataType.FP32, pseudo_quantize_array(values, qv, dtype))


def pseudo_quantize_array(values, qv: QuantizerValues, dtype=None) -> np.ndarray:
    return dequantize_array(quantize_array(values, qv, dtype), qv)


@dataclass(frozen=True)
class ObservationState:
    seen_min: float = math.inf
    seen_max: float = -math.inf
    count: int = 0


def observe(state: ObservationState, t) -> ObservationState:
    """Widen the observed range to cover every element of ``t``."""
    values = t.to_float() if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    if values.size == 0:
        raise ValueError("empty observation")
    return ObservationState(
        min(state.seen_min, float(values.min())),
        max(state.seen_max, float(values.max())),
        state.count + int(values.size),
    )


def widen_degenerate(f_min: float, f_max: float) -> tuple[float, float]:
    if f_max > f_min:
        return f_min, f_max
    pad = max(abs(f_min), 1.0) * 2.0**-8
    return f_min - pad, f_max + pad


class Quantizer:
    """A single quantizer slot of a layer (one bottom, top or parameter set).

    Parameter quantizers (``include_zero=True``) always cover zero so that
    single-valued or one-signed weights stay representable.
    """

    def __init__(self, name: str, role: str, include_zero: bool = False):
        self.name = name
        self.role = role
        self.include_zero = include_zero
        self.state = ObservationState()
        self.mode = QuantMode.PASSIVE

    def __repr__(self):
        return f"Quantizer({self.name!r}, {self.role}, count={self.state.count})"

    @property
    def has_range(self) -> bool:
        return self.state.count > 0

    def observe(self, values):
        self.state = observe(self.state, values)

    def reset(self):
        self.state = ObservationState()

    def range(self) -> tuple[float, float]:
        if not self.has_range:
            raise ValueError(f"quantizer for {self.name!r} has no observed range")
        lo, hi = self.state.seen_min, self.state.seen_max
        if self.include_zero:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        return widen_degenerate(lo, hi)

    def values(self, dtype) -> QuantizerValues:
        return estimate_params(*self.range(), dtype)


# --- fixed-point rescaling --------------------------------------------------


@dataclass(frozen=True)
class RequantParams:
    shift_bits: int
    mult: int
    shift: int
    in_zero: int
    out_zero: int
    out_min: int
    out_max: int

    @property
    def ratio(self) -> float:
        return self.mult / 2.0 ** (self.shift_bits + self.shift)


def default_shift_bits(dtype, wide: bool = True) -> int:
    """Mantissa bits for the multiplier: (32 or 16) / byte width - 1."""
    dtype = DataType.parse(dtype)
    return (32 if wide else 16) // dtype.byte_width - 1


def headroom_shift_bits(max_abs: int) -> int:
    """Widest multiplier (at most 31 bits) whose product with any value of
    magnitude ``max_abs`` stays inside a signed 64-bit register."""
    return max(1, min(31, 62 - int(max_abs).bit_length()))


def ratio_to_mult_shift(ratio, shift_bits: int, round_up: bool = False) -> tuple[int, int]:
    """Split ``ratio`` into m in [2^(shift_bits-1), 2^shift_bits) and shift h.

    ratio ~= m / 2^(shift_bits + h). With ``round_up`` the multiplier is
    never below the ratio, which keeps a truncating consumer (floor of a
    non-negative product) within one output step.
    """
    if isinstance(ratio, Fraction):
        ok = ratio > 0
    else:
        ok = isinstance(ratio, (int, float)) and math.isfinite(ratio) and ratio > 0
    if not ok:
        raise ValueError(f"invalid rescale ratio {ratio!r}")
    if not 1 <= shift_bits <= 31:
        raise ValueError(f"shift_bits must lie in [1, 31], got {shift_bits}")
    if round_up:
        r = Fraction(ratio)
        exp = math.floor(math.log2(r.numerator)) - math.floor(math.log2(r.denominator)) + 1
        while Fraction(2) ** exp <= r:
            exp += 1
        while Fraction(2) ** (exp - 1) > r:
            exp -= 1
        mult = math.ceil(r / Fraction(2) ** exp * (1 << shift_bits))
    else:
        mant, exp = math.frexp(ratio)  # mant in [0.5, 1)
        mult = round(mant * (1 << shift_bits))
    if mult == 1 << shift_bits:
        mult >>= 1
        exp += 1
    return int(mult), int(-exp)


def scale_quant_vals(
    qv_in: QuantizerValues,
    qv_out: QuantizerValues,
    shift_bits: Optional[int] = None,
    qv_b: Optional[QuantizerValues] = None,
    round_up: bool = False,
) -> RequantParams:
    """Multiplier/shift pair mapping input (or product) steps to output steps.

    For a unary op the ratio is s_in/s_out; passing ``qv_b`` gives the
    product ratio s_in*s_b/s_out used by GEMM and convolution. ``round_up``
    takes the ratio of the scales exactly and rounds the multiplier up.
    """
    if shift_bits is None:
        shift_bits = default_shift_bits(qv_in.dtype)
    if round_up:
        ratio = Fraction(qv_in.scale) / Fraction(qv_out.scale)
        if qv_b is not None:
            ratio *= Fraction(qv_b.scale)
    else:
        ratio = qv_in.scale / qv_out.scale
        if qv_b is not None:
            ratio *= qv_b.scale
    mult, shift = ratio_to_mult_shift(ratio, shift_bits, round_up)
    return RequantParams(shift_bits, mult, shift, qv_in.zero, qv_out.zero, qv_out.i_min, qv_out.i_max)


def rescale(acc, rq: RequantParams) -> np.ndarray:
    """round_half_even(acc * mult / 2^(shift_bits + shift)) in exact integers."""
    acc = np.asarray(acc, dtype=np.int64)
    total = rq.shift_bits + rq.shift
    if acc.size and int(np.abs(acc).max()) * rq.mult >= 1 << 63:
        raise OverflowError("accumulator too large for 64-bit rescaling")
    prod = acc * np.int64(rq.mult)
    if total <= 0:
        return prod << np.int64(-total)
    if total >= 63:
        return np.zeros_like(prod)
    q = prod >> np.int64(total)
    rem = prod - (q << np.int64(total))
    half = np.int64(1) << np.int64(total - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up


def requantize(acc, rq: RequantParams, dtype=None) -> np.ndarray:
    """Rescale, add the output zero-point and clamp to the output bounds."""
    out = np.clip(rescale(acc, rq) + rq.out_zero, rq.out_min, rq.out_max)
    if dtype is None:
        dtype = DataType.INT8Q if rq.out_max == 255 else DataType.INT16Q
    return out.astype(DataType.parse(dtype).storage)


def relu_kernel_args(rq: RequantParams) -> RequantParams:
    """Kernel launch arguments for the quantized ReLU.

    The kernel divides by 2^shift_bits before applying ``shift``; a negative
    shift would then drop low bits ahead of a left shift. Folding it into
    ``shift_bits`` keeps the product exact up to one final truncation.
    """
    if rq.shift >= 0:
        return rq
    total = rq.shift_bits + rq.shift
    if total >= 0:
        return replace(rq, shift_bits=total, shift=0)
    return replace(rq, shift_bits=0, shift=total)


def accumulator_capacity(dtype) -> int:
    """Largest K for which K * i_max^2 fits the signed accumulator."""
    dtype = DataType.parse(dtype)
    acc = derive_wide_types(dtype).acctype
    _, i_max = dtype.integer_bounds
    return ((1 << (acc.bits - 1)) - 1) // (i_max * i_max)

