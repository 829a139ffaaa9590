"""IEEE 754 binary16 conversion on raw bit patterns.

Both directions operate on numpy arrays (scalars are accepted and returned
as 0-d results). Narrowing rounds to nearest, ties to even; values beyond
the largest finite half saturate to infinity and subnormals are kept.
"""

import numpy as np

_QUIET_NAN = 0x7E00
_INF = 0x7C00


def fp16_encode(x):
    """Narrow float32 values to binary16 bit patterns (uint16)."""
    x = np.asarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.int64)
    sign = (bits >> 16) & 0x8000
    exp = (bits >> 23) & 0xFF
    mant = bits & 0x7FFFFF

    out = np.zeros(bits.shape, dtype=np.int64)

    # normal range of the result: unbiased exponent in [-14, 15]
    e = exp - 127
    normal = (exp != 0xFF) & (e >= -14)
    val = ((e + 15) << 10) | (mant >> 13)
    rem = mant & 0x1FFF
    up = (rem > 0x1000) | ((rem == 0x1000) & ((val & 1) == 1))
    val = val + up
    val = np.where(e > 15, _INF, np.minimum(val, _INF))
    out = np.where(normal, val, out)

    # subnormal (or underflow to zero) results
    sub = (exp != 0xFF) & (e < -14)
    full = np.where(exp == 0, mant, mant | 0x800000)
    eff_e = np.where(exp == 0, -126, e)
    shift = np.clip(-14 - eff_e + 13, 0, 40)
    shifted = np.where(shift >= 40, 0, full >> np.minimum(shift, 39))
    rmask = (np.int64(1) << shift) - 1
    srem = full & rmask
    halfway = np.int64(1) << np.maximum(shift - 1, 0)
    sup = (srem > halfway) | ((srem == halfway) & ((shifted & 1) == 1))
    out = np.where(sub, shifted + sup, out)

    is_nan = (exp == 0xFF) & (mant != 0)
    is_inf = (exp == 0xFF) & (mant == 0)
    out = np.where(is_inf, _INF, out)
    out = np.where(is_nan, _QUIET_NAN, out)
    return (out | sign).astype(np.uint16)


def fp16_decode(p):
    """Widen binary16 bit patterns to float32 exactly."""
    p = np.asarray(p, dtype=np.uint16).astype(np.int64)
    sign = np.where(p & 0x8000, -1.0, 1.0)
    exp = (p >> 10) & 0x1F
    mant = p & 0x3FF
    mag = np.where(
        exp == 0,
        np.ldexp(mant.astype(np.float64), -24),
        np.ldexp((mant + 1024).astype(np.float64), (exp - 25).astype(np.int32)),
    )
    mag = np.where(exp == 31, np.where(mant == 0, np.inf, np.nan), mag)
    return (sign * mag).astype(np.float32)


def fp16_round(x):
    """float32 -> binary16 -> float32."""
    return fp16_decode(fp16_encode(x))
