"""Reference operators in float and quantized integer arithmetic.

Float operators accept FP32 or FP16 tensors; FP16 inputs are widened to
float32, computed, and narrowed on store. Quantized operators work on the
stored unsigned integers and the tensors' quantizer values, with the wide
Difftype/Acctype intermediates emulated in int64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dtypes import DataType, derive_wide_types
from .quantizer import (
    QuantizerValues,
    RequantParams,
    accumulator_capacity,
    headroom_shift_bits,
    quantize_array,
    relu_kernel_args,
    requantize,
    rescale,
    scale_quant_vals,
)
from .tensor import Tensor


@dataclass(frozen=True)
class ConvParams:
    kernel_h: int
    kernel_w: int
    out_channels: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride_h", "stride_w", "groups", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("padding must be non-negative")
        if self.out_channels % self.groups:
            raise ValueError("out_channels not divisible by groups")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1 or h + 2 * self.pad_h < self.kernel_h or w + 2 * self.pad_w < self.kernel_w:
            raise ValueError(f"non-positive output extent for input {h}x{w}")
        return oh, ow


@dataclass(frozen=True)
class PoolParams:
    kernel: int
    stride: int = 1
    mode: str = "MAX"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if self.mode != "MAX":
            raise ValueError(f"unsupported pooling mode {self.mode!r}")

    def output_extent(self, n: int) -> int:
        out = (n - self.kernel) // self.stride + 1
        if n < self.kernel or out < 1:
            raise ValueError(f"pool window {self.kernel} larger than input {n}")
        return out


@dataclass(frozen=True)
class LRNParams:
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ValueError("local_size must be a positive odd integer")


def _float_in(t: Tensor) -> np.ndarray:
    if t.dtype.is_quantized:
        raise TypeError(f"float operator received {t.dtype.value} tensor")
    return t.to_float()


def _float_out(values: np.ndarray, dtype: DataType) -> Tensor:
    return Tensor.from_float(values, dtype)


# --- activations -------------------------------------------------------------


def relu_float(t: Tensor, negative_slope: float = 0.0) -> Tensor:
    x = _float_in(t)
    slope = np.float32(negative_slope)
    return _float_out(np.where(x > 0, x, x * slope), t.dtype)


def relu_quant_array(q: np.ndarray, rq: RequantParams, dtype) -> np.ndarray:
    """Integer ReLU exactly as the emitted kernel body computes it."""
    dtype = DataType.parse(dtype)
    wide = derive_wide_types(dtype)
    args = relu_kernel_args(rq)
    diff = np.asarray(q).astype(np.int64) - args.in_zero
    relu = _wrap(np.maximum(_wrap(diff, wide.difftype.bits), 0), wide.difftype.bits)
    prod = relu * np.int64(args.mult)  # Multtype is 64-bit
    div = np.int64(1) << np.int64(args.shift_bits)
    reg = _wrap(np.sign(prod) * (np.abs(prod) // div), wide.acctype.bits)
    if args.shift >= 0:
        reg = reg >> np.int64(args.shift)
    else:
        reg = _wrap(reg << np.int64(-args.shift), wide.acctype.bits)
    out = np.minimum(np.maximum(reg + args.out_zero, args.out_min), args.out_max)
    return out.astype(dtype.storage)


def relu_quant(t: Tensor, rq: RequantParams, qv_out: QuantizerValues) -> Tensor:
    return Tensor(t.dtype, relu_quant_array(t.data, rq, t.dtype), qv_out)


def relu(t: Tensor, negative_slope: float = 0.0, qv_out: Optional[QuantizerValues] = None) -> Tensor:
    if not t.dtype.is_quantized:
        return relu_float(t, negative_slope)
    qv_out = t.qvals if qv_out is None else qv_out
    return relu_quant(t, relu_requant_params(t.qvals, qv_out), qv_out)


def unary_requant_params(qv_in: QuantizerValues, qv_out: QuantizerValues) -> RequantParams:
    """Requantization for elementwise ops, with the 64-bit multiply's full headroom."""
    bits = headroom_shift_bits(qv_in.i_max - qv_in.i_min)
    return scale_quant_vals(qv_in, qv_out, shift_bits=bits)


def relu_requant_params(qv_in: QuantizerValues, qv_out: QuantizerValues) -> RequantParams:
    """Like unary_requant_params, with the multiplier rounded up.

    The kernel body truncates; a multiplier at or above the true ratio
    bounds the error below one output step.
    """
    bits = headroom_shift_bits(qv_in.i_max - qv_in.i_min)
    return scale_quant_vals(qv_in, qv_out, shift_bits=bits, round_up=True)


def _wrap(x, bits: int):
    if bits >= 64:
        return x
    half = np.int64(1) << np.int64(bits - 1)
    return ((x + half) & ((half << 1) - 1)) - half


def dropout_inference(t: Tensor) -> Tensor:
    return t


def softmax(t: Tensor) -> Tensor:
    if t.dtype is not DataType.FP32:
        raise TypeError("softmax requires float (FP32) input")
    x = t.data.astype(np.float64)
    axis = 1 if x.ndim > 1 else 0
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return Tensor(DataType.FP32, (e / e.sum(axis=axis, keepdims=True)).astype(np.float32))


def lrn(t: Tensor, lp: LRNParams = LRNParams()) -> Tensor:
    """Across-channel local response normalisation on (N, C, ...) input."""
    if t.dtype is not DataType.FP32:
        raise TypeError("lrn requires FP32 input")
    x = t.data.astype(np.float64)
    sq = x * x
    c = x.shape[1]
    half = lp.local_size // 2
    padded = np.concatenate(
        [np.zeros((x.shape[0], half) + x.shape[2:]), sq, np.zeros((x.shape[0], half) + x.shape[2:])], axis=1
    )
    window = sum(padded[:, i : i + c] for i in range(lp.local_size))
    out = x / (lp.k + lp.alpha / lp.local_size * window) ** lp.beta
    return Tensor(DataType.FP32, out.astype(np.float32))


def eltwise_sum(tensors: list[Tensor], qv_out: Optional[QuantizerValues] = None) -> Tensor:
    dtype = tensors[0].dtype
    if any(t.dtype is not dtype or t.shape != tensors[0].shape for t in tensors):
        raise ValueError("eltwise inputs must share dtype and shape")
    if not dtype.is_quantized:
        acc = sum(t.to_float().astype(np.float32) for t in tensors)
        return _float_out(acc, dtype)
    total = 0
    rq = None
    for t in tensors:
        rq = unary_requant_params(t.qvals, qv_out)
        total = total + rescale(t.data.astype(np.int64) - t.qvals.zero, rq)
    out = np.clip(total + rq.out_zero, rq.out_min, rq.out_max).astype(dtype.storage)
    return Tensor(dtype, out, qv_out)


def convert(t: Tensor, dtype, qv_out: Optional[QuantizerValues] = None) -> Tensor:
    """Type conversion performed by a quantizer layer."""
    dtype = DataType.parse(dtype)
    if dtype.is_quantized and t.dtype.is_quantized:
        # integer-only rescale between two quantized domains
        rq = unary_requant_params(t.qvals, qv_out)
        q = requantize(t.data.astype(np.int64) - t.qvals.zero, rq, dtype)
        return Tensor(dtype, q, qv_out)
    if dtype is t.dtype and not dtype.is_quantized:
        return t
    return Tensor.from_float(t.to_float(), dtype, qv_out)


# --- GEMM ---------------------------------------------------------------------


def gemm_float(A, B, alpha: float = 1.0, beta: float = 0.0, C=None) -> np.ndarray:
    """C <- alpha*A@B + beta*C in float32, evaluated row by row.

    Row-wise evaluation makes each output row independent of how many rows
    are batched together, which keeps per-sample and batched runs bit-equal.
    """
    A = np.asarray(A, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: {A.shape} @ {B.shape}")
    out = np.empty((A.shape[0], B.shape[1]), dtype=np.float32)
    for i in range(A.shape[0]):
        out[i] = A[i] @ B
    out *= np.float32(alpha)
    if beta != 0.0:
        if C is None:
            raise ValueError("beta != 0 needs C")
        C = np.asarray(C, dtype=np.float32)
        if C.shape != out.shape:
            raise ValueError(f"shape mismatch: C {C.shape} vs {out.shape}")
        out += np.float32(beta) * C
    return out


def gemm_accumulate(Aq, Bq, zero_a: int, zero_b: int) -> np.ndarray:
    """Zero-point corrected integer products, raw products multiplied first.

    acc = sum(a*b) - zero_a*sum_k(b) - zero_b*sum_k(a) + K*zero_a*zero_b
    """
    Aq = np.asarray(Aq).astype(np.int64)
    Bq = np.asarray(Bq).astype(np.int64)
    k = Aq.shape[1]
    raw = Aq @ Bq
    col_b = Bq.sum(axis=0, keepdims=True)
    row_a = Aq.sum(axis=1, keepdims=True)
    return raw - zero_a * col_b - zero_b * row_a + k * zero_a * zero_b


def bias_to_acc(bias, qv_a: QuantizerValues, qv_b: QuantizerValues) -> np.ndarray:
    bias = np.asarray(bias, dtype=np.float64)
    return np.rint(bias / (qv_a.scale * qv_b.scale)).astype(np.int64)


def gemm_quant(
    Aq,
    Bq,
    qv_a: QuantizerValues,
    qv_b: QuantizerValues,
    qv_c: QuantizerValues,
    rq: Optional[RequantParams] = None,
    bias=None,
    bias_axis: int = 1,
) -> np.ndarray:
    """Quantized C = A@B (+ bias) returning stored values in qv_c's type.

    ``bias`` is float and is converted once to the accumulator scale
    s_a*s_b; ``bias_axis`` selects whether it runs along columns (1) or
    rows (0) of C.
    """
    Aq = np.asarray(Aq)
    Bq = np.asarray(Bq)
    if Aq.ndim != 2 or Bq.ndim != 2 or Aq.shape[1] != Bq.shape[0]:
        raise ValueError(f"shape mismatch: {Aq.shape} @ {Bq.shape}")
    k = Aq.shape[1]
    cap = accumulator_capacity(qv_a.dtype)
    if k > cap:
        raise ValueError(f"K={k} exceeds accumulator capacity {cap}")
    acc = gemm_accumulate(Aq, Bq, qv_a.zero, qv_b.zero)
    b = None
    if bias is not None:
        b = bias_to_acc(bias, qv_a, qv_b)
        acc = acc + (b.reshape(1, -1) if bias_axis == 1 else b.reshape(-1, 1))
    if rq is None:
        rq = gemm_requant_params(k, qv_a, qv_b, qv_c, b)
    return requantize(acc, rq, qv_c.dtype)


def gemm_requant_params(k: int, qv_a, qv_b, qv_c, bias_acc=None) -> RequantParams:
    """Product rescale s_a*s_b/s_c with as many multiplier bits as the
    worst-case accumulator leaves room for."""
    bound = k * (qv_a.i_max - qv_a.i_min) * (qv_b.i_max - qv_b.i_min)
    if bias_acc is not None and np.size(bias_acc):
        bound += int(np.abs(np.asarray(bias_acc)).max())
    return scale_quant_vals(qv_a, qv_c, shift_bits=headroom_shift_bits(bound), qv_b=qv_b)


# --- convolution ------------------------------------------------------------


def im2col(x: np.ndarray, cp: ConvParams, pad_value=0) -> np.ndarray:
    """Unroll one sample (C, H, W) into a (C*kh*kw, out_h*out_w) matrix.

    Rows are ordered channel-major, then kernel row, then kernel column.
    """
    c, h, w = x.shape
    oh, ow = cp.output_hw(h, w)
    padded = np.full((c, h + 2 * cp.pad_h, w + 2 * cp.pad_w), pad_value, dtype=x.dtype)
    padded[:, cp.pad_h : cp.pad_h + h, cp.pad_w : cp.pad_w + w] = x
    cols = np.empty((c, cp.kernel_h, cp.kernel_w, oh, ow), dtype=x.dtype)
    for ky in range(cp.kernel_h):
        for kx in range(cp.kernel_w):
            cols[:, ky, kx] = padded[
                :,
                ky : ky + cp.stride_h * (oh - 1) + 1 : cp.stride_h,
                kx : kx + cp.stride_w * (ow - 1) + 1 : cp.stride_w,
            ]
    return cols.reshape(c * cp.kernel_h * cp.kernel_w, oh * ow)


def conv_forward(
    t: Tensor,
    weights: Tensor,
    bias: Optional[Tensor],
    cp: ConvParams,
    qv_out: Optional[QuantizerValues] = None,
) -> Tensor:
    """Grouped 2-D convolution through im2col and GEMM.

    Precision follows the input tensor. Quantized inputs pad with their
    zero-point and need quantized weights plus ``qv_out``.
    """
    if t.data.ndim != 4:
        raise ValueError("convolution input must be N x C x H x W")
    n, c, h, w = t.shape
    g = cp.groups
    if c % g:
        raise ValueError(f"in_channels {c} not divisible by groups {g}")
    o = cp.out_channels
    expected = (o, c // g, cp.kernel_h, cp.kernel_w)
    if weights.shape != expected:
        raise ValueError(f"weight shape {weights.shape} != {expected}")
    oh, ow = cp.output_hw(h, w)
    cg, og = c // g, o // g
    bias_f = None if bias is None else bias.to_float().reshape(-1)

    if t.dtype.is_quantized:
        if qv_out is None:
            raise ValueError("quantized convolution needs output quantizer values")
        if not weights.dtype.is_quantized:
            raise TypeError("quantized convolution needs quantized weights")
        qa, qw = t.qvals, weights.qvals
        kdim = cg * cp.kernel_h * cp.kernel_w
        rq = gemm_requant_params(kdim, qw, qa, qv_out, None if bias_f is None else bias_to_acc(bias_f, qw, qa))
        wmat = weights.data.reshape(o, -1)
        out = np.empty((n, o, oh * ow), dtype=qv_out.dtype.storage)
        for s in range(n):
            for gi in range(g):
                cols = im2col(t.data[s, gi * cg : (gi + 1) * cg], cp, pad_value=qa.zero)
                b = None if bias_f is None else bias_f[gi * og : (gi + 1) * og]
                out[s, gi * og : (gi + 1) * og] = gemm_quant(
                    wmat[gi * og : (gi + 1) * og], cols, qw, qa, qv_out, rq, bias=b, bias_axis=0
                )
        return Tensor(qv_out.dtype, out.reshape(n, o, oh, ow), qv_out)

    x = _float_in(t)
    wmat = _float_in(weights).reshape(o, -1)
    out = np.empty((n, o, oh * ow), dtype=np.float32)
    for s in range(n):
        for gi in range(g):
            cols = im2col(x[s, gi * cg : (gi + 1) * cg], cp)
            out[s, gi * og : (gi + 1) * og] = gemm_float(wmat[gi * og : (gi + 1) * og], cols)
    if bias_f is not None:
        out += bias_f.reshape(1, o, 1)
    return _float_out(out.reshape(n, o, oh, ow), t.dtype)


def inner_product(
    t: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    qv_out: Optional[QuantizerValues] = None,
) -> Tensor:
    """Fully connected layer; ``weights`` is K x out_features."""
    n = t.shape[0]
    k = t.count // n
    if weights.data.ndim != 2 or weights.shape[0] != k:
        raise ValueError(f"weights {weights.shape} do not match {k} input features")
    out_features = weights.shape[1]
    bias_f = None if bias is None else bias.to_float().reshape(-1)
    if bias_f is not None and bias_f.size != out_features:
        raise ValueError("bias length differs from out_features")

    if t.dtype.is_quantized:
        if qv_out is None:
            raise ValueError("quantized inner product needs output quantizer values")
        if not weights.dtype.is_quantized:
            raise TypeError("quantized inner product needs quantized weights")
        q = gemm_quant(t.data.reshape(n, k), weights.data, t.qvals, weights.qvals, qv_out, bias=bias_f)
        return Tensor(qv_out.dtype, q, qv_out)

    out = gemm_float(_float_in(t).reshape(n, k), _float_in(weights))
    if bias_f is not None:
        out += bias_f.reshape(1, -1)
    return _float_out(out, t.dtype)


def pool_max(t: Tensor, pp: PoolParams) -> Tensor:
    """Windowed maximum over H and W on the stored values.

    Max commutes with the monotone dequantization, so quantized tensors keep
    their quantizer values.
    """
    x = t.data
    if x.ndim != 4:
        raise ValueError("pooling input must be N x C x H x W")
    oh = pp.output_extent(x.shape[2])
    ow = pp.output_extent(x.shape[3])
    out = None
    for ky in range(pp.kernel):
        for kx in range(pp.kernel):
            win = x[:, :, ky : ky + pp.stride * (oh - 1) + 1 : pp.stride, kx : kx + pp.stride * (ow - 1) + 1 : pp.stride]
            out = win.copy() if out is None else np.maximum(out, win)
    return Tensor(t.dtype, out, t.qvals)


def quantize_weights(values, dtype, qv: QuantizerValues) -> Tensor:
    dtype = DataType.parse(dtype)
    return Tensor(dtype, quantize_array(values, qv, dtype), qv)
