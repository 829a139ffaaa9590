"""Data type tags and the wide intermediate types derived from them."""

import enum

import numpy as np


class DataType(enum.Enum):
    FP32 = "FP32"
    FP16 = "FP16"
    INT8Q = "INT8Q"
    INT16Q = "INT16Q"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTH[self]

    @property
    def is_quantized(self) -> bool:
        return self in (DataType.INT8Q, DataType.INT16Q)

    @property
    def is_float(self) -> bool:
        return not self.is_quantized

    @property
    def integer_bounds(self) -> tuple[int, int]:
        if not self.is_quantized:
            raise ValueError(f"{self.value} has no integer bounds")
        return 0, (1 << (8 * self.byte_width)) - 1

    @property
    def level_count(self) -> int:
        lo, hi = self.integer_bounds
        return hi - lo

    @property
    def storage(self) -> np.dtype:
        """numpy dtype used to hold elements of this type."""
        return np.dtype(_STORAGE[self])

    @property
    def tag(self) -> int:
        """One-byte identifier used by the model store."""
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "DataType":
        for dt, t in _TAGS.items():
            if t == tag:
                return dt
        raise ValueError(f"unknown dtype tag {tag}")

    @classmethod
    def parse(cls, name) -> "DataType":
        """Accept enum members, canonical names and the CLI spellings."""
        if isinstance(name, DataType):
            return name
        key = str(name).strip().upper()
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown data type {name!r}") from None


_BYTE_WIDTH = {DataType.FP32: 4, DataType.FP16: 2, DataType.INT16Q: 2, DataType.INT8Q: 1}
_STORAGE = {DataType.FP32: "<f4", DataType.FP16: "<f2", DataType.INT16Q: "<u2", DataType.INT8Q: "u1"}
_TAGS = {DataType.FP32: 0, DataType.FP16: 1, DataType.INT8Q: 2, DataType.INT16Q: 3}
_ALIASES = {
    "FLOAT": "FP32",
    "HALF": "FP16",
    "INT8": "INT8Q",
    "INT16": "INT16Q",
}


class WideType(enum.Enum):
    FP32 = "FP32"
    FP16 = "FP16"
    S16 = "S16"
    S32 = "S32"
    S64 = "S64"

    @property
    def bits(self) -> int:
        return {"FP32": 32, "FP16": 16, "S16": 16, "S32": 32, "S64": 64}[self.value]

    @property
    def is_integer(self) -> bool:
        return self.value.startswith("S")

    def wrap(self, value: int) -> int:
        """Two's-complement wrap of a Python int into this signed width."""
        if not self.is_integer:
            raise ValueError(f"{self.value} is not an integer type")
        half = 1 << (self.bits - 1)
        return ((int(value) + half) % (1 << self.bits)) - half


class WideTypeMap:
    __slots__ = ("source", "difftype", "acctype")

    def __init__(self, source: DataType, difftype: WideType, acctype: WideType):
        self.source = source
        self.difftype = difftype
        self.acctype = acctype

    def __eq__(self, other):
        if not isinstance(other, WideTypeMap):
            return NotImplemented
        return (self.source, self.difftype, self.acctype) == (
            other.source,
            other.difftype,
            other.acctype,
        )

    def __repr__(self):
        return f"WideTypeMap({self.source.value}, difftype={self.difftype.value}, acctype={self.acctype.value})"


def derive_wide_types(dtype: DataType) -> WideTypeMap:
    # Difftype is twice, Acctype four times the quantized width.
    if dtype is DataType.FP32:
        return WideTypeMap(dtype, WideType.FP32, WideType.FP32)
    if dtype is DataType.FP16:
        return WideTypeMap(dtype, WideType.FP16, WideType.FP16)
    if dtype is DataType.INT8Q:
        return WideTypeMap(dtype, WideType.S16, WideType.S32)
    return WideTypeMap(dtype, WideType.S32, WideType.S64)
