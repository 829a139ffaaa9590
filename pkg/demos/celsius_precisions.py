"""
Celsius to Fahrenheit at four precisions
========================================

A single neuron y = 1.8 x + 32 is calibrated once in FP32 and then run as
FP16, INT16 and INT8 twins. The INT8 error is dominated by one output step.
"""

import numpy as np

from mixprec.graph import zoo

x = zoo.celsius_inputs()  # every integer in [-273, 1000)
truth = x[:, 0].astype(np.float64) * 1.8 + 32

for dtype in ("fp32", "fp16", "int16", "int8"):
    net = zoo.celsius_net(dtype)
    err = np.abs(net.run(x)[:, 0] - truth)
    print(f"{dtype:>6}: max error {err.max():9.5f} F   mean {err.mean():8.5f} F")

# the INT8 output step, from the calibrated output range
net = zoo.celsius_net("int8")
qv = net.top_qvals(net.spec.layer("neuron"))
print(f"INT8 output step: {qv.scale:.4f} F, zero point {qv.zero}")
print("100 C ->", float(zoo.celsius_net("fp32").run([100.0])[0, 0]), "F")
