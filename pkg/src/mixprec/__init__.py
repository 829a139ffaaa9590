"""Mixed-precision inference: quantized types, reference operators, kernel
generation, a graph runtime and mixture-of-experts layers."""

from .dtypes import DataType, WideType, derive_wide_types
from .quantizer import (
    QuantizerValues,
    QuantMode,
    Quantizer,
    RequantParams,
    dequantize,
    estimate_params,
    pseudo_quantize,
    quantize,
    requantize,
    scale_quant_vals,
)
from .tensor import Tensor

__version__ = "0.1.0"
