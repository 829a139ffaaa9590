from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dtypes import DataType
from .fp16 import fp16_decode, fp16_encode


@dataclass(eq=False)
class Tensor:
    """Dense row-major tensor (N outermost) with optional quantizer values.

    ``data`` holds the stored elements in the dtype's storage width: float32,
    binary16, or unsigned integers for the quantized types.
    """

    dtype: DataType
    data: np.ndarray
    qvals: Optional["QuantizerValues"] = field(default=None)  # noqa: F821

    def __post_init__(self):
        self.dtype = DataType.parse(self.dtype)
        data = np.ascontiguousarray(self.data)
        if data.dtype != self.dtype.storage:
            raise TypeError(f"{self.dtype.value} tensor needs {self.dtype.storage} storage, got {data.dtype}")
        if data.ndim > 4:
            raise ValueError("tensors have at most 4 dimensions")
        if any(d <= 0 for d in data.shape):
            raise ValueError(f"extents must be positive, got {data.shape}")
        if self.dtype.is_quantized and self.qvals is None:
            raise ValueError(f"{self.dtype.value} tensor requires quantizer values")
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def count(self) -> int:
        return math.prod(self.data.shape)

    @property
    def nbytes(self) -> int:
        return self.count * self.dtype.byte_width

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def reshape(self, *shape) -> "Tensor":
        # views share the buffer; no copy
        return Tensor(self.dtype, self.data.reshape(*shape), self.qvals)

    def to_float(self) -> np.ndarray:
        """Real values as float32 (dequantized or widened as needed)."""
        if self.dtype is DataType.FP32:
            return self.data
        if self.dtype is DataType.FP16:
            return fp16_decode(self.data.view(np.uint16))
        from .quantizer import dequantize_array

        return dequantize_array(self.data, self.qvals)

    @classmethod
    def from_float(cls, values, dtype=DataType.FP32, qvals=None) -> "Tensor":
        dtype = DataType.parse(dtype)
        values = np.asarray(values, dtype=np.float32)
        if values.ndim == 0:
            values = values.reshape(1)
        if dtype is DataType.FP32:
            return cls(dtype, values.copy())
        if dtype is DataType.FP16:
            return cls(dtype, fp16_encode(values).view(np.float16))
        if qvals is None:
            raise ValueError(f"{dtype.value} conversion needs quantizer values")
        from .quantizer import quantize_array

        return cls(dtype, quantize_array(values, qvals, dtype), qvals)

    def astype(self, dtype, qvals=None) -> "Tensor":
        """Convert through float32; quantized targets need ``qvals``."""
        dtype = DataType.parse(dtype)
        if dtype is self.dtype and (qvals is None or qvals == self.qvals):
            return self
        return Tensor.from_float(self.to_float(), dtype, qvals)

    def __repr__(self):
        return f"Tensor({self.dtype.value}, shape={self.shape})"
