from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixprec.codegen import (
    ArgFlag,
    CacheError,
    CompilationScope,
    Dialect,
    KernelArg,
    KernelCache,
    canonicalize,
    define_types_header,
    emit_function_signature,
    emit_kernel_loop,
    emit_relu_program,
    relu_args,
    run_elementwise,
)
from mixprec.dtypes import DataType
from mixprec.ops import relu_quant_array, unary_requant_params
from mixprec.quantizer import estimate_params, relu_kernel_args, scale_quant_vals

DATA = Path(__file__).parent / "data"
ALL = list(DataType)


def norm(text):
    return [" ".join(line.split()) for line in text.splitlines() if line.strip()]


def kernel_text(source):
    """Everything from the function signature on."""
    lines = source.splitlines()
    start = next(i for i, l in enumerate(lines) if l.startswith(("__kernel", 'extern "C"')))
    return "\n".join(lines[start:])


@pytest.mark.parametrize(
    "dtype,dialect,fname",
    [
        ("fp32", "opencl", "relu_fp32.cl"),
        ("int8", "opencl", "relu_int8.cl"),
        ("fp32", "cuda", "relu_fp32.cu"),
        ("int8", "cuda", "relu_int8.cu"),
    ],
)
def test_relu_matches_reference_listing(dtype, dialect, fname):
    prog = emit_relu_program(dtype, dialect)
    assert norm(kernel_text(prog.source)) == norm((DATA / fname).read_text())


def test_relu_argument_counts():
    assert len(relu_args("int8")) == 10
    assert len(relu_args("int16")) == 10
    assert len(relu_args("fp32")) == 4
    assert len(relu_args("fp16")) == 4


def test_types_header_examples():
    h = define_types_header("int8", "int8", "int8")
    assert "#define Multtype int64_t" in h
    assert "#define Difftype int16_t" in h and "#define Acctype int32_t" in h
    h = define_types_header("int16", "int16", "int16")
    assert "#define Difftype int32_t" in h and "#define Acctype int64_t" in h
    h = define_types_header("fp32", "fp32", "fp32")
    assert "Multtype" not in h and "#define Dtype float" in h
    assert "#define Multtype int32_t" in define_types_header("int8", "int8", "int8", prefer_wide=False)


def test_signature_rendering():
    args = [KernelArg("n", "uint32_t", ArgFlag.CONST), KernelArg("buf", "float", ArgFlag.LOCAL_MEM)]
    assert "__local float* buf" in emit_function_signature("k", args, "opencl")
    with pytest.raises(ValueError, match="duplicate argument"):
        emit_function_signature("k", args + [args[0]], "cuda")
    with pytest.raises(ValueError):
        KernelArg("x", "float", ArgFlag.GLOBAL_MEM | ArgFlag.LOCAL_MEM)


def test_kernel_loop_per_dialect():
    assert "get_global_id(0)" in emit_kernel_loop("i", "n", "opencl")
    assert "threadIdx.x" in emit_kernel_loop("i", "n", Dialect.CUDA)
    with pytest.raises(ValueError, match="unknown dialect"):
        Dialect.parse("metal")


def test_scope_rejects_duplicate_names():
    scope = CompilationScope()
    emit_relu_program("fp32", "opencl", scope=scope)
    with pytest.raises(ValueError, match="already defined"):
        emit_relu_program("int8", "opencl", scope=scope)


@pytest.mark.parametrize("dtype", ALL)
def test_emission_deterministic_and_dialects_agree(dtype):
    a = emit_relu_program(dtype, "opencl")
    assert a.source == emit_relu_program(dtype, "opencl").source
    b = emit_relu_program(dtype, "cuda")
    assert loop_lines(a.source)[1:] == loop_lines(b.source)[1:]
    assert [x.name for x in a.args] == [x.name for x in b.args]


def loop_lines(source):
    lines = norm(source)
    i = next(k for k, l in enumerate(lines) if l.startswith("for ("))
    return lines[i:]


def test_hashes_distinct():
    digests = {emit_relu_program(d, dl).hexdigest for d in ALL for dl in Dialect}
    assert len(digests) == len(ALL) * len(Dialect)


def test_fp16_preamble():
    assert "cl_khr_fp16" in emit_relu_program("fp16", "opencl").source
    assert "cuda_fp16.h" in emit_relu_program("fp16", "cuda").source


def _args_dict(rq):
    return asdict(relu_kernel_args(rq))


@pytest.mark.parametrize("dialect", list(Dialect))
@pytest.mark.parametrize(
    "lo_in,hi_in,lo_out,hi_out",
    [(-1, 1, -1, 1), (-3, 5, 0, 5), (-0.5, 2.0, 0, 8.0), (0, 1, 0, 0.25), (-10, 0.1, 0, 0.1)],
)
def test_interpreted_int8_kernel_matches_reference(dialect, lo_in, hi_in, lo_out, hi_out):
    qi = estimate_params(lo_in, hi_in, DataType.INT8Q)
    qo = estimate_params(lo_out, hi_out, DataType.INT8Q)
    rq = unary_requant_params(qi, qo)
    prog = emit_relu_program("int8", dialect)
    x = np.arange(256, dtype=np.uint8)
    got = run_elementwise(prog, x, _args_dict(rq))
    assert np.array_equal(got, relu_quant_array(x, rq, "int8"))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(15, 31))
def test_interpreted_int16_kernel_matches_reference(a, b, bits):
    qi = estimate_params(-a, a, DataType.INT16Q)
    qo = estimate_params(0, b, DataType.INT16Q)
    rq = scale_quant_vals(qi, qo, shift_bits=bits)
    prog = emit_relu_program("int16", "opencl")
    x = np.random.default_rng(0).integers(0, 65536, 300).astype(np.uint16)
    got = run_elementwise(prog, x, _args_dict(rq))
    assert np.array_equal(got, relu_quant_array(x, rq, "int16"))


def test_interpreted_float_kernel():
    prog = emit_relu_program("fp32", "cuda")
    x = np.array([-2.0, -0.0, 0.5, 3.0], np.float32)
    got = run_elementwise(prog, x, {"negative_slope": 0.25})
    assert np.allclose(np.asarray(got, dtype=np.float64), [-0.5, 0.0, 0.5, 3.0])


def test_cache_put_get_reopen(tmp_path):
    path = tmp_path / "k.cache"
    cache = KernelCache(path)
    prog = emit_relu_program("int8", "opencl")
    assert cache.get(prog.content_hash) is None and len(cache) == 0
    blob = canonicalize(prog.source)
    assert cache.put(prog, blob) is True
    assert cache.put(prog, blob) is False
    assert cache.get(prog.content_hash) == blob
    size = path.stat().st_size
    again = KernelCache(path)
    assert again.get(prog.content_hash) == blob and len(again) == 1
    assert path.stat().st_size == size


def test_cache_load_or_build(tmp_path):
    cache = KernelCache(tmp_path / "k.cache")
    progs = [emit_relu_program(d, "cuda") for d in ALL]
    blobs = [cache.load_or_build(p) for p in progs]
    assert len(cache) == len(ALL)
    assert [cache.load_or_build(p) for p in progs] == blobs
    assert all(p.content_hash in cache for p in progs)


def test_cache_truncated_record_ignored(tmp_path):
    path = tmp_path / "k.cache"
    cache = KernelCache(path)
    p1, p2 = emit_relu_program("fp32", "opencl"), emit_relu_program("int8", "opencl")
    cache.put(p1, b"one")
    cache.put(p2, b"two" * 100)
    raw = path.read_bytes()
    path.write_bytes(raw[:-50])
    reopened = KernelCache(path)
    assert reopened.get(p1.content_hash) == b"one"
    assert reopened.get(p2.content_hash) is None
    reopened.put(p2, b"again")
    assert KernelCache(path).get(p2.content_hash) == b"again"


def test_cache_bad_magic(tmp_path):
    path = tmp_path / "k.cache"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(CacheError):
        KernelCache(path)


def test_cache_rejects_bad_key(tmp_path):
    with pytest.raises(ValueError):
        KernelCache(tmp_path / "k").put(b"short", b"x")
