"""Small ready-made graphs used by the demos, tests and CLI."""

from __future__ import annotations

import numpy as np

from ..dtypes import DataType
from .net import Net
from .precision import with_precision
from .spec import GraphSpec, LayerKind, make_layer

CELSIUS_WEIGHTS = {"neuron": [np.array([[1.8]], np.float32), np.array([32.0], np.float32)]}
CELSIUS_DOMAIN = (-273, 1000)


def celsius_graph(dtype=DataType.FP32) -> GraphSpec:
    """celsius -> quantizer -> one-neuron inner product -> quantizer -> fahrenheit."""
    dt = DataType.parse(dtype)
    f32 = DataType.FP32
    return GraphSpec(
        "celsius",
        [
            make_layer("input", LayerKind.INPUT, tops=["celsius"], shape=[1, 1]),
            make_layer("celsius_quant", LayerKind.QUANTIZER, ["celsius"], ["celsius_q"], f32, dt),
            make_layer("neuron", LayerKind.INNER_PRODUCT, ["celsius_q"], dtype=dt, num_output=1),
            make_layer("output", LayerKind.QUANTIZER, ["neuron"], ["fahrenheit"], dt, f32),
        ],
    )


def celsius_inputs(lo: int = CELSIUS_DOMAIN[0], hi: int = CELSIUS_DOMAIN[1]) -> np.ndarray:
    return np.arange(lo, hi, dtype=np.float32).reshape(-1, 1)


def celsius_net(dtype=DataType.FP32, calibration=None) -> Net:
    """The converter with exact weights, calibrated at FP32 then rewritten."""
    net = Net(celsius_graph(DataType.FP32), weights=CELSIUS_WEIGHTS)
    net.calibrate([celsius_inputs() if calibration is None else calibration])
    return net if DataType.parse(dtype) is DataType.FP32 else net.to_precision(dtype)


def chain_graph(n: int = 8, shape=(1, 1024), dtype=DataType.FP32) -> GraphSpec:
    """An input followed by ``n`` ReLU layers."""
    layers = [make_layer("data", LayerKind.INPUT, dtype=dtype, shape=list(shape))]
    for i in range(n):
        layers.append(make_layer(f"relu{i + 1}", LayerKind.RELU, [layers[-1].tops[0]], dtype=dtype))
    return GraphSpec(f"chain{n}", layers)


def conv_graph(dtype=DataType.FP32, channels: int = 3, size: int = 8, classes: int = 10) -> GraphSpec:
    """conv -> relu -> pool -> conv -> relu -> fc -> softmax."""
    g = GraphSpec(
        "small_cnn",
        [
            make_layer("data", LayerKind.INPUT, shape=[1, channels, size, size]),
            make_layer("conv1", LayerKind.CONV, ["data"], num_output=8, kernel_size=3, pad=1),
            make_layer("relu1", LayerKind.RELU, ["conv1"]),
            make_layer("pool1", LayerKind.POOL, ["relu1"], kernel_size=2, stride=2),
            make_layer("conv2", LayerKind.CONV, ["pool1"], num_output=8, kernel_size=3, pad=1, group=2),
            make_layer("relu2", LayerKind.RELU, ["conv2"]),
            make_layer("fc", LayerKind.INNER_PRODUCT, ["relu2"], num_output=classes),
            make_layer("prob", LayerKind.SOFTMAX, ["fc"]),
        ],
    )
    return with_precision(g, dtype)


def _mlp(name: str, in_dim: int, hidden: int, out_dim: int, relu_out: bool) -> dict:
    layers = [
        make_layer("x", LayerKind.INPUT, shape=[1, in_dim]),
        make_layer("ip1", LayerKind.INNER_PRODUCT, ["x"], num_output=hidden),
        make_layer("act", LayerKind.RELU, ["ip1"]),
        make_layer("ip2", LayerKind.INNER_PRODUCT, ["act"], num_output=out_dim),
    ]
    if relu_out:
        layers.append(make_layer("out", LayerKind.RELU, ["ip2"]))
    return GraphSpec(name, layers).to_dict()


def moe_graph(
    n_experts: int = 4,
    top_k: int = 2,
    batch_mode: str = "PER_SAMPLE",
    in_dim: int = 8,
    out_dim: int = 4,
    gate_dim: int = 6,
    noise: bool = False,
    seed: int = 0,
) -> GraphSpec:
    """Input -> MOE layer (MLP gating features, MLP experts)."""
    moe = make_layer(
        "moe",
        LayerKind.MOE,
        ["x"],
        n_experts=n_experts,
        top_k=top_k,
        batch_mode=batch_mode,
        noise=noise,
        seed=seed,
        gating=_mlp("gating", in_dim, gate_dim, gate_dim, relu_out=True),
        expert=_mlp("expert", in_dim, 2 * in_dim, out_dim, relu_out=False),
    )
    return GraphSpec("moe", [make_layer("x", LayerKind.INPUT, shape=[1, in_dim]), moe])
