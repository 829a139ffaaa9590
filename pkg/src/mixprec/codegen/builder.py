"""Dialect-abstracted kernel source emission (OpenCL and CUDA C)."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..dtypes import DataType, WideType, derive_wide_types


class Dialect(enum.Enum):
    OPENCL = "OPENCL"
    CUDA = "CUDA"

    @classmethod
    def parse(cls, name) -> "Dialect":
        if isinstance(name, Dialect):
            return name
        try:
            return cls(str(name).strip().upper())
        except ValueError:
            raise ValueError(f"unknown dialect {name!r}") from None


class ArgFlag(enum.IntFlag):
    NONE = 0
    CONST = 1
    GLOBAL_MEM = 2
    LOCAL_MEM = 4


C_TYPES = {
    DataType.FP32: "float",
    DataType.FP16: "half",
    DataType.INT8Q: "uint8_t",
    DataType.INT16Q: "uint16_t",
    WideType.FP32: "float",
    WideType.FP16: "half",
    WideType.S16: "int16_t",
    WideType.S32: "int32_t",
    WideType.S64: "int64_t",
}


def c_type(t) -> str:
    return C_TYPES[t]


@dataclass(frozen=True)
class KernelArg:
    name: str
    ctype: str
    flags: ArgFlag = ArgFlag.NONE

    def __post_init__(self):
        if ArgFlag.GLOBAL_MEM in self.flags and ArgFlag.LOCAL_MEM in self.flags:
            raise ValueError(f"argument {self.name!r} cannot be both global and local memory")

    @property
    def is_pointer(self) -> bool:
        return bool(self.flags & (ArgFlag.GLOBAL_MEM | ArgFlag.LOCAL_MEM))


@dataclass
class KernelProgram:
    name: str
    dialect: Dialect
    source: str
    args: list[KernelArg] = field(default_factory=list)

    @property
    def content_hash(self) -> bytes:
        return program_hash(self.dialect, self.source)

    @property
    def hexdigest(self) -> str:
        return self.content_hash.hex()


def program_hash(dialect: Dialect, source: str) -> bytes:
    h = hashlib.sha256()
    h.update(dialect.value.encode())
    h.update(b"\0")
    h.update(source.encode("utf-8"))
    return h.digest()


class CompilationScope:
    """Kernel names already emitted into one program."""

    def __init__(self):
        self.names: set[str] = set()

    def claim(self, name: str):
        if name in self.names:
            raise ValueError(f"kernel name {name!r} already defined in this compilation scope")
        self.names.add(name)


_OPENCL_SETUP = """\
typedef uchar uint8_t;
typedef char int8_t;
typedef ushort uint16_t;
typedef short int16_t;
typedef uint uint32_t;
typedef int int32_t;
typedef ulong uint64_t;
typedef long int64_t;
typedef uint32_t uint_tp;
"""

_CUDA_SETUP = """\
typedef unsigned char uint8_t;
typedef signed char int8_t;
typedef unsigned short uint16_t;
typedef short int16_t;
typedef unsigned int uint32_t;
typedef int int32_t;
typedef unsigned long long uint64_t;
typedef long long int64_t;
typedef uint32_t uint_tp;
"""


def setup_preamble(dialect: Dialect, uses_half: bool = False) -> str:
    dialect = Dialect.parse(dialect)
    if dialect is Dialect.OPENCL:
        pre = "#pragma OPENCL EXTENSION cl_khr_fp16 : enable\n" if uses_half else ""
        return pre + _OPENCL_SETUP
    pre = "#include <cuda_fp16.h>\n" if uses_half else ""
    return pre + _CUDA_SETUP


def define_types_header(compute, input, output, prefer_wide: bool = True) -> str:
    compute, input, output = (DataType.parse(x) for x in (compute, input, output))
    wide = derive_wide_types(input)
    lines = []
    if input.is_quantized:
        lines.append(f"#define Multtype {'int64_t' if prefer_wide else 'int32_t'}")
    lines += [
        f"#define Dtype {c_type(compute)}",
        f"#define MItype {c_type(input)}",
        f"#define MOtype {c_type(output)}",
        f"#define Difftype {c_type(wide.difftype)}",
        f"#define Acctype {c_type(wide.acctype)}",
    ]
    return "\n".join(lines) + "\n"


def _render_arg(arg: KernelArg, dialect: Dialect) -> str:
    const = "const " if ArgFlag.CONST in arg.flags else ""
    if arg.is_pointer:
        if dialect is Dialect.OPENCL:
            space = "__global " if ArgFlag.GLOBAL_MEM in arg.flags else "__local "
            return f"{space}{const}{arg.ctype}* {arg.name}"
        return f"{const}{arg.ctype}* {arg.name}"
    ctype = arg.ctype
    if dialect is Dialect.OPENCL and ctype == "half":
        # OpenCL has no half by-value arguments
        ctype = "float"
    return f"{const}{ctype} {arg.name}"


def emit_function_signature(
    name: str,
    args: Iterable[KernelArg],
    dialect,
    scope: Optional[CompilationScope] = None,
) -> str:
    dialect = Dialect.parse(dialect)
    args = list(args)
    seen = set()
    for a in args:
        if a.name in seen:
            raise ValueError(f"duplicate argument {a.name!r}")
        seen.add(a.name)
    if scope is not None:
        scope.claim(name)
    params = ", ".join(_render_arg(a, dialect) for a in args)
    if dialect is Dialect.OPENCL:
        return f"__kernel\nvoid {name}({params}) {{\n"
    return f'extern "C" __global__ void\n{name}({params}) {{\n'


def emit_kernel_loop(index_name: str, count_name: str, dialect, index_type: str = "uint_tp") -> str:
    dialect = Dialect.parse(dialect)
    if dialect is Dialect.OPENCL:
        start, step = "get_global_id(0)", "get_global_size(0)"
    else:
        start, step = "blockIdx.x * blockDim.x + threadIdx.x", "blockDim.x * gridDim.x"
    return (
        f"for ({index_type} {index_name} = {start}; {index_name} < ({count_name}); "
        f"{index_name} += {step}) {{\n"
    )


_FLOAT_RELU_BODY = ["out[index] = in[index] > (Dtype)0 ? in[index] : in[index] * negative_slope;"]

_INT_RELU_BODY = [
    "Difftype relu = max((Difftype)((Difftype)(in[index]) - in_zero), (Difftype)0);",
    "Acctype reg = (Acctype)(((Multtype)(relu) * (Multtype)(mult)) / ((Multtype)1 << shift_bits));",
    "if (shift >= 0) {",
    "reg = reg >> shift;",
    "} else {",
    "reg = reg << -shift;",
    "}",
    "out[index] = (Dtype)(min(max(reg + out_zero, out_min), out_max));",
]


def relu_args(dtype) -> list[KernelArg]:
    dtype = DataType.parse(dtype)
    wide = derive_wide_types(dtype)
    dt = c_type(dtype)
    args = [
        KernelArg("n", "uint32_t", ArgFlag.CONST),
        KernelArg("in", dt, ArgFlag.CONST | ArgFlag.GLOBAL_MEM),
        KernelArg("out", dt, ArgFlag.GLOBAL_MEM),
    ]
    if dtype.is_float:
        args.append(KernelArg("negative_slope", dt, ArgFlag.CONST))
        return args
    diff, acc = c_type(wide.difftype), c_type(wide.acctype)
    args += [
        KernelArg("shift_bits", "int8_t", ArgFlag.CONST),
        KernelArg("in_zero", diff, ArgFlag.CONST),
        KernelArg("mult", acc, ArgFlag.CONST),
        KernelArg("shift", "int8_t", ArgFlag.CONST),
        KernelArg("out_zero", acc, ArgFlag.CONST),
        KernelArg("out_min", acc, ArgFlag.CONST),
        KernelArg("out_max", acc, ArgFlag.CONST),
    ]
    return args


def emit_relu_program(
    dtype,
    dialect,
    prefer_wide: bool = True,
    scope: Optional[CompilationScope] = None,
) -> KernelProgram:
    dtype = DataType.parse(dtype)
    dialect = Dialect.parse(dialect)
    args = relu_args(dtype)
    parts = [
        setup_preamble(dialect, uses_half=dtype is DataType.FP16),
        define_types_header(dtype, dtype, dtype, prefer_wide),
        emit_function_signature("ReLUForward", args, dialect, scope),
        "\t" + emit_kernel_loop("index", "n", dialect),
    ]
    body = _FLOAT_RELU_BODY if dtype.is_float else _INT_RELU_BODY
    depth = 2
    for line in body:
        if line.startswith("}"):
            depth -= 1
        parts.append("\t" * depth + line + "\n")
        if line.endswith("{"):
            depth += 1
    parts.append("\t}\n}\n")
    return KernelProgram("ReLUForward", dialect, "".join(parts), args)


EMITTERS = {"relu": emit_relu_program}
