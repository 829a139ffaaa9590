from .builder import (
    EMITTERS,
    ArgFlag,
    CompilationScope,
    Dialect,
    KernelArg,
    KernelProgram,
    define_types_header,
    emit_function_signature,
    emit_kernel_loop,
    emit_relu_program,
    relu_args,
)
from .cache import CacheError, KernelCache, canonicalize
from .interp import run_elementwise
