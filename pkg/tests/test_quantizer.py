import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mixprec.dtypes import DataType
from mixprec.quantizer import (
    ObservationState,
    Quantizer,
    default_shift_bits,
    dequantize,
    estimate_params,
    headroom_shift_bits,
    observe,
    pseudo_quantize,
    pseudo_quantize_array,
    quantize,
    quantize_array,
    ratio_to_mult_shift,
    requantize,
    rescale,
    scale_quant_vals,
)
from mixprec.tensor import Tensor

from oracles import rescale_exact, scale_zero

QTYPES = [DataType.INT8Q, DataType.INT16Q]
finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def test_observe_examples():
    s = observe(ObservationState(), [0.0])
    assert (s.seen_min, s.seen_max) == (0.0, 0.0)
    s = observe(ObservationState(-1, 2, 1), [3.5, -0.5])
    assert (s.seen_min, s.seen_max) == (-1, 3.5)
    once = observe(ObservationState(), [1.0, -2.0])
    twice = observe(once, [1.0, -2.0])
    assert (twice.seen_min, twice.seen_max) == (once.seen_min, once.seen_max)
    with pytest.raises(ValueError, match="empty observation"):
        observe(ObservationState(), [])


@given(st.lists(finite, min_size=1), st.lists(finite, min_size=1))
def test_observe_only_widens(a, b):
    s1 = observe(ObservationState(), a)
    s2 = observe(s1, b)
    assert s2.seen_min <= s1.seen_min and s2.seen_max >= s1.seen_max
    assert s2.seen_min == min(np.float32(a + b)) and s2.seen_max == max(np.float32(a + b))
    assert s2.count == len(a) + len(b)


def test_estimate_examples():
    qv = estimate_params(0, 255, DataType.INT8Q)
    assert (qv.scale, qv.zero, qv.one) == (1.0, 0, 1.0)
    qv = estimate_params(-273, 1000, DataType.INT8Q)
    assert qv.scale == pytest.approx(1273 / 255) and qv.zero == 55
    qv = estimate_params(-394.6, 1832, DataType.INT8Q)
    assert qv.scale == pytest.approx(8.7318, abs=1e-4) and qv.zero == 45
    with pytest.raises(ValueError, match="degenerate range"):
        estimate_params(1.0, 1.0, DataType.INT8Q)


@settings(max_examples=300)
@given(finite, finite, st.sampled_from(QTYPES))
def test_estimate_invariants(a, b, dt):
    lo, hi = sorted([a, b])
    assume(hi - lo > 1e-3)
    qv = estimate_params(lo, hi, dt)
    s, z = scale_zero(lo, hi, *dt.integer_bounds)
    assert qv.scale == pytest.approx(float(s), rel=1e-12)
    assert qv.zero == z
    assert qv.i_min <= qv.zero <= qv.i_max
    assert qv.one == pytest.approx(1 / qv.scale + qv.zero)


def test_zero_point_clamps_when_range_excludes_zero():
    assert estimate_params(2.0, 5.0, DataType.INT8Q).zero == 0
    assert estimate_params(-5.0, -2.0, DataType.INT8Q).zero == 255


def test_quantize_examples():
    qv = estimate_params(0, 255, DataType.INT8Q)
    assert quantize_array([3.2, 0.0, 1e6, -1e6], qv).tolist() == [3, 0, 255, 0]
    qv = estimate_params(-273, 1000, DataType.INT8Q)
    assert int(quantize_array([0.0], qv)[0]) == qv.zero
    assert float(dequantize_array_one(qv.zero + 1, qv)) == pytest.approx(4.99216, abs=1e-5)
    assert float(dequantize_array_one(qv.zero, qv)) == 0.0


def dequantize_array_one(q, qv):
    return dequantize(Tensor(qv.dtype, np.array([q], dtype=qv.dtype.storage), qv)).data[0]


@given(st.sampled_from(QTYPES), st.lists(st.floats(allow_nan=True, allow_infinity=True, width=32), min_size=1))
def test_quantize_saturates(dt, xs):
    qv = estimate_params(-3, 7, dt)
    q = quantize_array(xs, qv)
    assert q.dtype == dt.storage
    assert q.min() >= qv.i_min and q.max() <= qv.i_max


@pytest.mark.parametrize("dt", QTYPES)
def test_round_trip_error_dense_grid(dt):
    qv = estimate_params(-3.7, 11.2, dt)
    x = np.linspace(qv.f_min, qv.f_max, 200_001)
    err = np.abs(dequantize(quantize(Tensor.from_float(x), qv)).data - x.astype(np.float32))
    assert err.max() <= qv.scale / 2 * (1 + 1e-5) + 1e-6


def test_pseudo_quantize_examples():
    qv = estimate_params(0, 2.55, DataType.INT8Q)
    assert pseudo_quantize_array([0.3], qv)[0] == np.float32(0.3)
    lo = pseudo_quantize_array([qv.f_min], qv)[0]
    assert lo == np.float32(qv.scale * (qv.i_min - qv.zero))
    rng = np.random.default_rng(0)
    out = pseudo_quantize(Tensor.from_float(rng.uniform(-5, 5, 1000)), estimate_params(-5, 5, DataType.INT8Q))
    assert out.dtype is DataType.FP32
    assert len(np.unique(out.data)) <= 256


@given(st.lists(finite, min_size=1, max_size=50), st.sampled_from(QTYPES))
def test_pseudo_quantize_idempotent(xs, dt):
    qv = estimate_params(-100, 300, dt)
    once = pseudo_quantize_array(xs, qv)
    assert np.array_equal(pseudo_quantize_array(once, qv), once)


def test_quantizer_param_range_includes_zero():
    q = Quantizer("w", "param", include_zero=True)
    q.observe([1.8])
    qv = q.values(DataType.INT8Q)
    assert qv.f_min == 0.0 and qv.zero == 0
    assert dequantize(quantize(Tensor.from_float([1.8]), qv)).data[0] == pytest.approx(1.8, rel=1e-6)


def test_quantizer_constant_range_widened():
    q = Quantizer("b", "top")
    q.observe([4.0, 4.0])
    lo, hi = q.range()
    assert lo == 4.0 - 4.0 / 256 and hi == 4.0 + 4.0 / 256
    with pytest.raises(ValueError, match="no observed range"):
        Quantizer("x", "top").range()


def test_default_shift_bits():
    assert default_shift_bits(DataType.INT8Q) == 31
    assert default_shift_bits(DataType.INT16Q) == 15
    assert default_shift_bits(DataType.INT8Q, wide=False) == 15


def test_mult_shift_examples():
    assert ratio_to_mult_shift(1.0, 31) == (2**30, -1)
    assert ratio_to_mult_shift(1.5, 15) == (24576, -1)
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ValueError, match="invalid rescale ratio"):
            ratio_to_mult_shift(bad, 31)
    with pytest.raises(ValueError):
        ratio_to_mult_shift(1.0, 32)


def test_identity_ratio_is_exact():
    qv = estimate_params(0, 255, DataType.INT16Q)
    rq = scale_quant_vals(qv, qv, shift_bits=31)
    x = np.arange(2**16)
    assert np.array_equal(rescale(x, rq), x)


@settings(max_examples=200)
@given(st.floats(2.0**-10, 2.0**10), st.integers(1, 31))
def test_mult_normalised(r, bits):
    m, h = ratio_to_mult_shift(r, bits)
    assert 2 ** (bits - 1) <= m < 2**bits
    assert abs(m / 2.0 ** (bits + h) - r) <= r * 2.0**-bits


@settings(max_examples=200)
@given(st.floats(2.0**-10, 2.0**10), st.integers(-(2**15), 2**15 - 1), st.sampled_from([15, 31]))
def test_rescale_bound(r, x, bits):
    qv = estimate_params(0, 1, DataType.INT8Q)
    m, h = ratio_to_mult_shift(r, bits)
    rq = scale_quant_vals(qv, qv, bits)
    rq = type(rq)(bits, m, h, 0, 0, -(2**62), 2**62)
    got = int(rescale(np.array([x]), rq)[0])
    assert got == rescale_exact(x, m, bits + h)
    assert abs(got - round(x * r)) <= max(1, abs(x * r) * 2.0 ** (1 - bits))


def test_requantize_clamps():
    a = estimate_params(-1, 1, DataType.INT8Q)
    c = estimate_params(-0.5, 0.5, DataType.INT8Q)
    rq = scale_quant_vals(a, c)
    out = requantize(np.array([-200, 0, 200]), rq, DataType.INT8Q)
    assert out.tolist() == [0, c.zero, 255]


def test_headroom_shift_bits():
    assert headroom_shift_bits(255) == 31
    assert headroom_shift_bits(2**40) == 21
    assert headroom_shift_bits(0) == 31
    x = 2**40 - 1
    bits = headroom_shift_bits(x)
    assert x * (2**bits - 1) < 2**63


def test_ratio_product_for_gemm():
    a = estimate_params(0, 1, DataType.INT8Q)
    b = estimate_params(0, 2, DataType.INT8Q)
    c = estimate_params(0, 4, DataType.INT8Q)
    rq = scale_quant_vals(a, c, qv_b=b)
    want = Fraction(a.scale) * Fraction(b.scale) / Fraction(c.scale)
    assert abs(Fraction(rq.ratio) - want) / want < Fraction(1, 2**30)


@settings(max_examples=200)
@given(st.floats(2.0**-20, 2.0**20), st.integers(1, 31))
def test_mult_round_up_never_below_ratio(r, bits):
    m, h = ratio_to_mult_shift(r, bits, round_up=True)
    assert 2 ** (bits - 1) <= m <= 2**bits
    approx = Fraction(m) / Fraction(2) ** (bits + h)
    assert approx >= Fraction(r)
    assert approx - Fraction(r) <= Fraction(r) * Fraction(2) ** (1 - bits)
    m2, h2 = ratio_to_mult_shift(Fraction(r), bits, round_up=True)
    assert (m2, h2) == (m, h)
