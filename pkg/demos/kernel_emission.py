"""
Emitting and running a quantized ReLU kernel
============================================

The generator writes OpenCL or CUDA source. A small interpreter executes
the loop body so the text can be checked against the numpy reference.
"""

import tempfile
from pathlib import Path

import numpy as np

from mixprec.codegen import KernelCache, emit_relu_program, run_elementwise
from mixprec.dtypes import DataType
from mixprec.ops import relu_quant_array, relu_requant_params
from mixprec.quantizer import estimate_params, relu_kernel_args

prog = emit_relu_program("int8", "opencl")
print(prog.source)
print("hash:", prog.hexdigest)

qi = estimate_params(-2, 6, DataType.INT8Q)
qo = estimate_params(0, 6, DataType.INT8Q)
rq = relu_requant_params(qi, qo)
x = np.arange(256, dtype=np.uint8)
kernel = run_elementwise(prog, x, vars(relu_kernel_args(rq)))
print("interpreted kernel == reference:", np.array_equal(kernel, relu_quant_array(x, rq, "int8")))

# compiled programs are cached by content hash
with tempfile.TemporaryDirectory() as d:
    cache = KernelCache(Path(d) / "kernels.bin")
    for dialect in ("opencl", "cuda"):
        for dt in ("fp32", "int8"):
            cache.load_or_build(emit_relu_program(dt, dialect))
    print("cached programs:", len(cache))
