"""
Scale, zero point and fixed-point rescaling
===========================================
"""

import numpy as np

from mixprec.dtypes import DataType
from mixprec.quantizer import dequantize_array, estimate_params, quantize_array, ratio_to_mult_shift, rescale, scale_quant_vals

# a real range maps onto the 256 levels of INT8Q
qv = estimate_params(-273, 1000, DataType.INT8Q)
print(f"scale={qv.scale:.5f} zero={qv.zero}")

x = np.array([-273.0, -1.0, 0.0, 3.3, 999.0], np.float32)
q = quantize_array(x, qv)
print("stored:", q.tolist())
print("back:  ", dequantize_array(q, qv).astype(float).round(3).tolist())

# a float ratio becomes an integer multiplier and a shift
m, h = ratio_to_mult_shift(0.3, 31)
print(f"0.3 ~= {m} / 2^{31 + h} = {m / 2 ** (31 + h)!r}")

# moving values from one quantized domain to another is pure integer work
a = estimate_params(-1, 1, DataType.INT8Q)
b = estimate_params(-4, 4, DataType.INT8Q)
rq = scale_quant_vals(a, b)
acc = np.arange(-128, 128, 32)
print("rescaled:", rescale(acc, rq).tolist())
