"""Network descriptions: layers, JSON form, shape inference and validation.

A graph is stored as JSON::

    {"name": "celsius",
     "inspect": [],                       # blobs excluded from memory reuse
     "pseudo_quant": {"neuron": "INT8Q"}, # blobs binned in PSEUDO mode
     "layers": [
        {"name": "neuron", "type": "INNER_PRODUCT",
         "bottom": ["celsius_q"], "top": ["neuron"],
         "bottom_data_type": "INT8Q", "compute_data_type": "INT8Q",
         "top_data_type": "INT8Q",
         "inner_product_param": {"num_output": 1}}, ...]}

Data types default to FP32. Each kind reads its own ``<kind>_param``
object (see ``PARAM_KEYS``).
"""

from __future__ import annotations

import copy
import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..dtypes import DataType
from ..ops import ConvParams, LRNParams, PoolParams
from ..quantizer import accumulator_capacity

SCHEMA_VERSION = 1


class LayerKind(enum.Enum):
    INPUT = "INPUT"
    CONV = "CONV"
    POOL = "POOL"
    INNER_PRODUCT = "INNER_PRODUCT"
    RELU = "RELU"
    LRN = "LRN"
    SOFTMAX = "SOFTMAX"
    QUANTIZER = "QUANTIZER"
    DROPOUT = "DROPOUT"
    MOE = "MOE"
    ELTWISE = "ELTWISE"


PARAM_KEYS = {
    LayerKind.INPUT: "input_param",
    LayerKind.CONV: "convolution_param",
    LayerKind.POOL: "pooling_param",
    LayerKind.INNER_PRODUCT: "inner_product_param",
    LayerKind.RELU: "relu_param",
    LayerKind.LRN: "lrn_param",
    LayerKind.SOFTMAX: "softmax_param",
    LayerKind.QUANTIZER: "quantizer_param",
    LayerKind.DROPOUT: "dropout_param",
    LayerKind.MOE: "moe_param",
    LayerKind.ELTWISE: "eltwise_param",
}

_ALIASES = {"CONVOLUTION": "CONV", "POOLING": "POOL", "INNERPRODUCT": "INNER_PRODUCT"}

# kinds whose input and output types may differ
MIXED_KINDS = (LayerKind.QUANTIZER, LayerKind.MOE)
FP32_ONLY = (LayerKind.SOFTMAX, LayerKind.LRN)


class GraphError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class LayerSpec:
    name: str
    kind: LayerKind
    bottoms: list[str] = field(default_factory=list)
    tops: list[str] = field(default_factory=list)
    mi_type: DataType = DataType.FP32
    d_type: DataType = DataType.FP32
    mo_type: DataType = DataType.FP32
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.kind, str):
            key = self.kind.strip().upper()
            self.kind = LayerKind(_ALIASES.get(key, key))
        self.mi_type = DataType.parse(self.mi_type)
        self.d_type = DataType.parse(self.d_type)
        self.mo_type = DataType.parse(self.mo_type)
        self.bottoms = list(self.bottoms)
        self.tops = list(self.tops)

    @property
    def param_set_count(self) -> int:
        if self.kind in (LayerKind.CONV, LayerKind.INNER_PRODUCT):
            return 2 if self.params.get("bias_term", True) else 1
        if self.kind is LayerKind.MOE:
            return 3
        return 0

    def conv_params(self) -> ConvParams:
        p = self.params
        k = p.get("kernel_size", 1)
        s = p.get("stride", 1)
        pad = p.get("pad", 0)
        return ConvParams(
            kernel_h=int(p.get("kernel_h", k)),
            kernel_w=int(p.get("kernel_w", k)),
            out_channels=int(p["num_output"]),
            stride_h=int(p.get("stride_h", s)),
            stride_w=int(p.get("stride_w", s)),
            pad_h=int(p.get("pad_h", pad)),
            pad_w=int(p.get("pad_w", pad)),
            groups=int(p.get("group", 1)),
        )

    def pool_params(self) -> PoolParams:
        p = self.params
        return PoolParams(int(p["kernel_size"]), int(p.get("stride", 1)), p.get("pool", "MAX"))

    def lrn_params(self) -> LRNParams:
        p = self.params
        return LRNParams(
            int(p.get("local_size", 5)),
            float(p.get("alpha", 1e-4)),
            float(p.get("beta", 0.75)),
            float(p.get("k", 1.0)),
        )

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "type": self.kind.value,
            "bottom": list(self.bottoms),
            "top": list(self.tops),
            "bottom_data_type": self.mi_type.value,
            "compute_data_type": self.d_type.value,
            "top_data_type": self.mo_type.value,
        }
        if self.params:
            d[PARAM_KEYS[self.kind]] = copy.deepcopy(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        layer = cls(
            name=d["name"],
            kind=d["type"],
            bottoms=d.get("bottom", []),
            tops=d.get("top", []),
            mi_type=d.get("bottom_data_type", "FP32"),
            d_type=d.get("compute_data_type", "FP32"),
            mo_type=d.get("top_data_type", "FP32"),
        )
        layer.params = copy.deepcopy(d.get(PARAM_KEYS[layer.kind], {}))
        return layer


@dataclass
class GraphSpec:
    name: str
    layers: list[LayerSpec] = field(default_factory=list)
    inspect: list[str] = field(default_factory=list)
    pseudo_quant: dict = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def producers(self) -> dict[str, LayerSpec]:
        return {top: layer for layer in self.layers for top in layer.tops}

    def consumers(self) -> dict[str, list[LayerSpec]]:
        out: dict[str, list[LayerSpec]] = {}
        for layer in self.layers:
            for b in layer.bottoms:
                out.setdefault(b, []).append(layer)
        return out

    def inputs(self) -> list[str]:
        return [t for layer in self.layers if layer.kind is LayerKind.INPUT for t in layer.tops]

    def outputs(self) -> list[str]:
        """Blobs produced but never consumed, in production order."""
        consumed = {b for layer in self.layers for b in layer.bottoms}
        return [t for layer in topological_order(self) for t in layer.tops if t not in consumed]

    def blob_dtypes(self) -> dict[str, DataType]:
        return {top: layer.mo_type for layer in self.layers for top in layer.tops}

    def to_dict(self) -> dict:
        d = {"version": SCHEMA_VERSION, "name": self.name, "layers": [l.to_dict() for l in self.layers]}
        if self.inspect:
            d["inspect"] = list(self.inspect)
        if self.pseudo_quant:
            d["pseudo_quant"] = {k: DataType.parse(v).value for k, v in self.pseudo_quant.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSpec":
        version = d.get("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported graph schema version {version}")
        return cls(
            name=d.get("name", "net"),
            layers=[LayerSpec.from_dict(x) for x in d["layers"]],
            inspect=list(d.get("inspect", [])),
            pseudo_quant={k: DataType.parse(v) for k, v in d.get("pseudo_quant", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GraphSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GraphSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def copy(self) -> "GraphSpec":
        return GraphSpec.from_dict(self.to_dict())


def _layer_deps(g: GraphSpec) -> list[set[int]]:
    producer = {}
    for i, layer in enumerate(g.layers):
        for t in layer.tops:
            producer.setdefault(t, i)
    return [{producer[b] for b in layer.bottoms if b in producer} for layer in g.layers]


def topological_order(g: GraphSpec) -> list[LayerSpec]:
    """Kahn's algorithm; ready layers run in declaration order."""
    deps = _layer_deps(g)
    users: list[list[int]] = [[] for _ in g.layers]
    pending = [len(d) for d in deps]
    for i, d in enumerate(deps):
        for j in d:
            users[j].append(i)
    ready = [i for i, n in enumerate(pending) if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(g.layers[i])
        for u in users[i]:
            pending[u] -= 1
            if pending[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(g.layers):
        raise GraphError(["not a DAG"])
    return order


def _arity_ok(layer: LayerSpec) -> bool:
    nb, nt = len(layer.bottoms), len(layer.tops)
    if layer.kind is LayerKind.INPUT:
        return nb == 0 and nt >= 1
    if layer.kind is LayerKind.ELTWISE:
        return nb >= 2 and nt == 1
    return nb == 1 and nt == 1


def _layer_shape(layer: LayerSpec, shapes: list[tuple]) -> list[tuple]:
    k = layer.kind
    if k is LayerKind.INPUT:
        shape = tuple(int(d) for d in layer.params["shape"])
        if not 1 <= len(shape) <= 4 or any(d < 1 for d in shape):
            raise ValueError(f"bad input shape {shape}")
        return [shape] * len(layer.tops)
    x = shapes[0]
    if k is LayerKind.CONV:
        if len(x) != 4:
            raise ValueError("convolution needs a 4-d input")
        cp = layer.conv_params()
        if x[1] % cp.groups:
            raise ValueError(f"in_channels {x[1]} not divisible by groups {cp.groups}")
        oh, ow = cp.output_hw(x[2], x[3])
        return [(x[0], cp.out_channels, oh, ow)]
    if k is LayerKind.POOL:
        if len(x) != 4:
            raise ValueError("pooling needs a 4-d input")
        pp = layer.pool_params()
        return [(x[0], x[1], pp.output_extent(x[2]), pp.output_extent(x[3]))]
    if k is LayerKind.INNER_PRODUCT:
        n_out = int(layer.params["num_output"])
        if n_out < 1:
            raise ValueError("num_output must be positive")
        return [(x[0], n_out)]
    if k is LayerKind.LRN:
        if len(x) < 2:
            raise ValueError("lrn needs a channel axis")
        layer.lrn_params()
        return [x]
    if k is LayerKind.ELTWISE:
        if any(s != x for s in shapes):
            raise ValueError(f"eltwise shapes differ: {shapes}")
        return [x]
    if k is LayerKind.MOE:
        from .net import moe_output_shape

        return [moe_output_shape(layer, x)]
    return [x]


def infer_shapes(g: GraphSpec) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for layer in topological_order(g):
        outs = _layer_shape(layer, [shapes[b] for b in layer.bottoms])
        for t, s in zip(layer.tops, outs):
            shapes[t] = s
    return shapes


def _type_rule_violations(layer: LayerSpec) -> list[str]:
    out = []
    k = layer.kind
    name = k.value.lower().replace("_", " ")
    if k is LayerKind.INPUT:
        return out
    if k in MIXED_KINDS:
        if layer.d_type is not layer.mi_type:
            out.append(f"{name} type mismatch in layer '{layer.name}': compute type must equal bottom type")
        return out
    if not (layer.mi_type is layer.d_type is layer.mo_type):
        out.append(f"{name} type mismatch in layer '{layer.name}'")
    if k in FP32_ONLY and layer.d_type is not DataType.FP32:
        out.append(f"{name} requires FP32 in layer '{layer.name}'")
    return out


def _param_violations(layer: LayerSpec) -> list[str]:
    req = {
        LayerKind.INPUT: ["shape"],
        LayerKind.CONV: ["num_output"],
        LayerKind.POOL: ["kernel_size"],
        LayerKind.INNER_PRODUCT: ["num_output"],
        LayerKind.MOE: ["n_experts", "top_k", "gating", "expert"],
    }.get(layer.kind, [])
    return [f"layer '{layer.name}' missing parameter '{p}'" for p in req if p not in layer.params]


def validate(g: GraphSpec) -> list[str]:
    """Every violated graph invariant, as human-readable messages."""
    v: list[str] = []
    names = [layer.name for layer in g.layers]
    for n in sorted({n for n in names if names.count(n) > 1}):
        v.append(f"duplicate layer name '{n}'")
    producers: dict[str, LayerSpec] = {}
    for layer in g.layers:
        for t in layer.tops:
            if t in producers:
                v.append(f"blob '{t}' produced by both '{producers[t].name}' and '{layer.name}'")
            else:
                producers[t] = layer
    for layer in g.layers:
        if not _arity_ok(layer):
            v.append(f"layer '{layer.name}' has wrong bottom/top count for {layer.kind.value}")
        for b in layer.bottoms:
            if b not in producers:
                v.append(f"blob '{b}' consumed by '{layer.name}' but never produced")
        v += _type_rule_violations(layer)
        v += _param_violations(layer)
    for layer in g.layers:
        for b in layer.bottoms:
            p = producers.get(b)
            if p is not None and p.mo_type is not layer.mi_type:
                v.append(
                    f"blob '{b}' dtype mismatch: produced as {p.mo_type.value} by '{p.name}', "
                    f"consumed as {layer.mi_type.value} by '{layer.name}'"
                )
    for blob in list(g.inspect) + list(g.pseudo_quant):
        if blob not in producers:
            v.append(f"flagged blob '{blob}' does not exist")
    for blob, dt in g.pseudo_quant.items():
        if not DataType.parse(dt).is_quantized:
            v.append(f"pseudo-quantization target for '{blob}' is not a quantized type")
    try:
        order = topological_order(g)
    except GraphError:
        v.append("not a DAG")
        return v
    if v:
        return v
    shapes: dict[str, tuple] = {}
    for layer in order:
        try:
            outs = _layer_shape(layer, [shapes[b] for b in layer.bottoms])
        except (ValueError, KeyError, TypeError, GraphError) as exc:
            v.append(f"shape error in layer '{layer.name}': {exc}")
            return v
        for t, s in zip(layer.tops, outs):
            shapes[t] = s
        if layer.d_type.is_quantized and layer.kind in (LayerKind.CONV, LayerKind.INNER_PRODUCT):
            x = shapes[layer.bottoms[0]]
            if layer.kind is LayerKind.CONV:
                cp = layer.conv_params()
                k = x[1] // cp.groups * cp.kernel_h * cp.kernel_w
            else:
                k = math.prod(x[1:])
            cap = accumulator_capacity(layer.d_type)
            if k > cap:
                v.append(f"layer '{layer.name}' reduction length {k} exceeds accumulator capacity {cap}")
    return v


def check(g: GraphSpec):
    violations = validate(g)
    if violations:
        raise GraphError(violations)


def make_layer(
    name: str,
    kind,
    bottoms=(),
    tops=None,
    dtype=DataType.FP32,
    mo_type: Optional[DataType] = None,
    **params,
) -> LayerSpec:
    """Shorthand constructor; ``tops`` defaults to ``[name]``."""
    dtype = DataType.parse(dtype)
    return LayerSpec(
        name=name,
        kind=kind,
        bottoms=list(bottoms),
        tops=[name] if tops is None else list(tops),
        mi_type=dtype,
        d_type=dtype,
        mo_type=dtype if mo_type is None else DataType.parse(mo_type),
        params=params,
    )
