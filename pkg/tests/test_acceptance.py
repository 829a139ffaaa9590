"""The ten acceptance criteria, one test each, at their stated tolerances."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mixprec import ops
from mixprec.codegen import emit_relu_program, relu_args, run_elementwise
from mixprec.dtypes import DataType
from mixprec.graph import Net, load_model, payload_bytes, plan_conflicts, plan_memory, save_model
from mixprec.graph import zoo
from mixprec.graph.store import collect, encode
from mixprec.moe import load_balance_loss
from mixprec.ops import ConvParams
from mixprec.quantizer import estimate_params, ratio_to_mult_shift, relu_kernel_args, rescale, scale_quant_vals
from mixprec.tensor import Tensor

from graphgen import moe_pair, random_dag, random_model
from oracles import conv_direct

PRECISIONS = [DataType.FP32, DataType.FP16, DataType.INT16Q, DataType.INT8Q]
Q8, Q16 = DataType.INT8Q, DataType.INT16Q
DATA = Path(__file__).parent / "data"


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.2f}s, limit {self.limit}s"


@pytest.mark.criterion(1, "payload bytes FP32:FP16:INT16:INT8 = 4:2:2:1")
def test_storage_ratios(tmp_path):
    with Timer(1.0):
        base = Net(zoo.conv_graph(), seed=0)
        base.calibrate([np.random.default_rng(0).standard_normal((2, 3, 8, 8))])
        sizes = []
        for dt in PRECISIONS:
            p = tmp_path / dt.value
            save_model(base.to_precision(dt), p)
            sizes.append(payload_bytes(load_model(p)))
    unit = sizes[3]
    assert sizes == [4 * unit, 2 * unit, 2 * unit, unit], sizes


def _celsius_errors(dtype):
    net = zoo.celsius_net(dtype)
    x = zoo.celsius_inputs()
    truth = x[:, 0].astype(np.float64) * 1.8 + 32.0
    return np.abs(net.run(x)[:, 0].astype(np.float64) - truth)


@pytest.mark.criterion(2, "celsius INT8: 4.3658 <= max|err| <= 8.74 F")
def test_celsius_int8():
    with Timer(1.0):
        err = _celsius_errors(Q8)
    assert 4.3658 <= err.max() <= 8.74, err.max()


@pytest.mark.criterion(3, "celsius INT16: max|err| <= 0.034 F")
def test_celsius_int16():
    with Timer(1.0):
        err = _celsius_errors(Q16)
    assert err.max() <= 0.034, err.max()


def _random_qv(rng, dtype):
    lo = -rng.uniform(0, 4) if rng.random() < 0.8 else rng.uniform(0, 1)
    hi = lo + rng.uniform(0.1, 8)
    return estimate_params(lo, hi, dtype)


def _stored(rng, qv, shape):
    return rng.integers(qv.i_min, qv.i_max + 1, size=shape).astype(qv.dtype.storage)


def _exact(q, qv):
    return q.astype(np.int64) - qv.zero


def _out_qv(ref, dtype):
    lo, hi = min(float(ref.min()), 0.0), max(float(ref.max()), 0.0)
    if hi - lo < 1e-6:
        hi = lo + 1.0
    return estimate_params(lo, hi, dtype)


def _steps(q, qv, ref):
    return np.abs(qv.scale * (q.astype(np.int64) - qv.zero) - ref).max() / qv.scale


def _relu_instance(rng, dt):
    qi = _random_qv(rng, dt)
    x = _stored(rng, qi, (int(rng.integers(1, 64)),))
    ref = np.maximum(qi.scale * _exact(x, qi), 0.0)
    qo = _out_qv(ref, dt)
    return _steps(ops.relu(Tensor(dt, x, qi), qv_out=qo).data, qo, ref)


def _gemm_instance(rng, dt):
    m, n, k = (int(v) for v in rng.integers(1, 9, 3))
    qa, qb = _random_qv(rng, dt), _random_qv(rng, dt)
    a, b = _stored(rng, qa, (m, k)), _stored(rng, qb, (k, n))
    ref = qa.scale * qb.scale * (_exact(a, qa) @ _exact(b, qb)).astype(np.float64)
    qc = _out_qv(ref, dt)
    return _steps(ops.gemm_quant(a, b, qa, qb, qc), qc, ref)


def _conv_instance(rng, dt):
    groups = int(rng.integers(1, 3))
    c = groups * int(rng.integers(1, 5 // groups + 1))
    o = groups * int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(3, 9, 2))
    kh = int(rng.integers(1, min(h, 3) + 1))
    pad, stride = int(rng.integers(0, 2)), int(rng.integers(1, 3))
    cp = ConvParams(kh, kh, o, stride, stride, pad, pad, groups)
    qx, qw = _random_qv(rng, dt), _random_qv(rng, dt)
    x, wt = _stored(rng, qx, (1, c, h, w)), _stored(rng, qw, (o, c // groups, kh, kh))
    bias = rng.uniform(-1, 1, o).astype(np.float32)
    acc = conv_direct(_exact(x, qx), _exact(wt, qw), None, (stride, stride), (pad, pad), groups)
    ref = qx.scale * qw.scale * acc.astype(np.float64) + bias.reshape(1, -1, 1, 1).astype(np.float64)
    qo = _out_qv(ref, dt)
    out = ops.conv_forward(Tensor(dt, x, qx), Tensor(dt, wt, qw), Tensor.from_float(bias), cp, qo)
    return _steps(out.data, qo, ref)


def _ip_instance(rng, dt):
    n, k, out = int(rng.integers(1, 5)), int(rng.integers(1, 33)), int(rng.integers(1, 9))
    qx, qw = _random_qv(rng, dt), _random_qv(rng, dt)
    x, wt = _stored(rng, qx, (n, k)), _stored(rng, qw, (k, out))
    bias = rng.uniform(-2, 2, out).astype(np.float32)
    ref = qx.scale * qw.scale * (_exact(x, qx) @ _exact(wt, qw)).astype(np.float64) + bias.astype(np.float64)
    qo = _out_qv(ref, dt)
    got = ops.inner_product(Tensor(dt, x, qx), Tensor(dt, wt, qw), Tensor.from_float(bias), qo)
    return _steps(got.data, qo, ref)


@pytest.mark.criterion(4, "quantized ops within 2 (INT8) / 1 (INT16) output steps, 200 instances each")
def test_operator_fidelity():
    rng = np.random.default_rng(2024)
    worst = {}
    with Timer(30.0):
        for name, fn in [("relu", _relu_instance), ("gemm", _gemm_instance),
                         ("conv", _conv_instance), ("ip", _ip_instance)]:
            for dt in (Q8, Q16):
                worst[name, dt.value] = max(fn(rng, dt) for _ in range(200))
    for (name, dt), steps in worst.items():
        assert steps <= (2 if dt == "INT8Q" else 1), (name, dt, steps)


@pytest.mark.criterion(5, "requant |y - round(x*r)| <= max(1, |x*r|*2^-30), shift_bits=31")
def test_requantization_accuracy():
    rng = np.random.default_rng(5)
    x = np.arange(-32768, 32768, dtype=np.int64)
    base = scale_quant_vals(estimate_params(0, 1, Q8), estimate_params(0, 1, Q8), shift_bits=31)
    with Timer(10.0):
        worst = 0.0
        for r in 2.0 ** rng.uniform(-10, 10, 1000):
            m, h = ratio_to_mult_shift(r, 31)
            rq = replace(base, mult=m, shift=h, out_zero=0, out_min=-(2**62), out_max=2**62)
            y = rescale(x, rq)
            xr = x * r
            excess = np.abs(y - np.rint(xr)) - np.maximum(1.0, np.abs(xr) * 2.0**-30)
            worst = max(worst, float(excess.max()))
    assert worst <= 0, worst


def _norm(text):
    return [" ".join(line.split()) for line in text.splitlines() if line.strip()]


@pytest.mark.criterion(6, "emitted ReLU matches the four reference listings; 10 / 4 arguments")
def test_emitted_code_conformance():
    cases = [("fp32", "opencl", "relu_fp32.cl"), ("int8", "opencl", "relu_int8.cl"),
             ("fp32", "cuda", "relu_fp32.cu"), ("int8", "cuda", "relu_int8.cu")]
    with Timer(1.0):
        for dt, dialect, fname in cases:
            got = _norm(emit_relu_program(dt, dialect).source)
            want = _norm((DATA / fname).read_text())
            start = got.index(want[0])
            assert got[start : start + len(want)] == want, fname
        assert [len(relu_args(d)) for d in PRECISIONS] == [4, 4, 10, 10]


@pytest.mark.criterion(7, "interpreted INT8 ReLU body == relu_quant over all 256 inputs, 20 trials")
def test_emitted_code_semantics():
    rng = np.random.default_rng(7)
    x = np.arange(256, dtype=np.uint8)
    with Timer(5.0):
        for trial in range(20):
            qi, qo = _random_qv(rng, Q8), _random_qv(rng, Q8)
            rq = scale_quant_vals(qi, qo, shift_bits=int(rng.integers(8, 32)))
            prog = emit_relu_program("int8", "opencl" if trial % 2 else "cuda")
            scalars = vars(relu_kernel_args(rq))
            got = run_elementwise(prog, x, scalars)
            want = ops.relu_quant(Tensor(Q8, x, qi), rq, qo).data
            assert np.array_equal(got, want), trial


@pytest.mark.criterion(8, "chain reuse peak = 2/9 of no-reuse; no slot conflicts on 500 random DAGs")
def test_memory_planner():
    with Timer(10.0):
        g = zoo.chain_graph(8)
        on, off = plan_memory(g, True), plan_memory(g, False)
        assert on.peak_bytes * 9 == off.peak_bytes * 2
        rng = np.random.default_rng(8)
        for _ in range(500):
            g = random_dag(rng, int(rng.integers(1, 30)))
            on, off = plan_memory(g, True), plan_memory(g, False)
            assert plan_conflicts(on) == [] and on.peak_bytes <= off.peak_bytes


@pytest.mark.criterion(9, "MOE loss examples exact; PER_SAMPLE == ALL_EXPERTS on 100 nets; weights sum to 1")
def test_moe_correctness():
    with Timer(30.0):
        assert load_balance_loss([3, 3, 3, 3], 4, 2, 6) == 0.0
        assert load_balance_loss([4, 0, 0, 0], 4, 1, 4) == 0.1875
        rng = np.random.default_rng(9)
        for i in range(100):
            a, b, x = moe_pair(rng)
            assert a.run(x).tobytes() == b.run(x).tobytes(), i
            w = a.moe["moe"].last_selection.weights.astype(np.float64)
            assert np.abs(w.sum(axis=1) - 1).max() <= 1e-6


@pytest.mark.criterion(10, "save -> load -> save byte-identical, 50 random models x 4 precisions")
def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    with Timer(5.0):
        for i in range(50):
            for dt in PRECISIONS:
                net = random_model(rng, dt, n_layers=int(rng.integers(1, 8)))
                p1, p2 = tmp_path / "a", tmp_path / "b"
                save_model(net, p1)
                save_model(Net(net.spec, seed=i + 1).load(p1), p2)
                assert p1.read_bytes() == p2.read_bytes(), (i, dt)
