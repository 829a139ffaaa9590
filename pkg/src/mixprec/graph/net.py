"""Executable networks: parameters, quantizers and the forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .. import ops
from ..dtypes import DataType
from ..moe import BatchMode, GatingParams, MOEConfig, moe_forward
from ..quantizer import QuantizerValues, QuantMode, Quantizer, pseudo_quantize, quantize_array
from ..tensor import Tensor
from .spec import GraphError, GraphSpec, LayerKind, LayerSpec, infer_shapes, topological_order, validate


class QuantizationError(RuntimeError):
    pass


PARAM_NAMES = {
    LayerKind.CONV: ["weight", "bias"],
    LayerKind.INNER_PRODUCT: ["weight", "bias"],
    LayerKind.MOE: ["gate_a", "gate_b", "gate_c"],
}


@dataclass
class LayerQuantizers:
    bottoms: list[Quantizer] = field(default_factory=list)
    tops: list[Quantizer] = field(default_factory=list)
    params: list[Quantizer] = field(default_factory=list)

    def __iter__(self) -> Iterator[Quantizer]:
        yield from self.bottoms
        yield from self.tops
        yield from self.params

    def __len__(self):
        return len(self.bottoms) + len(self.tops) + len(self.params)


def layer_quantizers(layer: LayerSpec) -> LayerQuantizers:
    names = PARAM_NAMES.get(layer.kind, [])[: layer.param_set_count]
    return LayerQuantizers(
        bottoms=[Quantizer(b, "bottom") for b in layer.bottoms],
        tops=[Quantizer(t, "top") for t in layer.tops],
        params=[Quantizer(f"{layer.name}/{n}", "param", include_zero=True) for n in names],
    )


def attach_quantizers(g: GraphSpec, existing: Optional[dict] = None) -> dict[str, LayerQuantizers]:
    """One quantizer per bottom, top and parameter set of every layer.

    Layers already present in ``existing`` keep their quantizers, so
    re-attaching is a no-op.
    """
    existing = {} if existing is None else existing
    out = {}
    for layer in g.layers:
        out[layer.name] = existing.get(layer.name) or layer_quantizers(layer)
    return out


def _moe_subgraph(layer: LayerSpec, key: str, in_shape: tuple) -> GraphSpec:
    sub = GraphSpec.from_dict(layer.params[key])
    for l in sub.layers:
        if l.kind is LayerKind.INPUT:
            l.params["shape"] = list(in_shape)
    return sub


def _single_output_shape(sub: GraphSpec) -> tuple:
    outs = sub.outputs()
    if len(sub.inputs()) != 1 or len(outs) != 1:
        raise ValueError(f"nested graph '{sub.name}' needs exactly one input and one output")
    return infer_shapes(sub)[outs[0]]


def moe_output_shape(layer: LayerSpec, in_shape: tuple) -> tuple:
    for key in ("gating", "expert"):
        sub = _moe_subgraph(layer, key, in_shape)
        problems = validate(sub)
        if problems:
            raise ValueError(f"{key} graph invalid: {problems[0]}")
        if any(l.mi_type.is_quantized or l.mo_type.is_quantized for l in sub.layers):
            raise ValueError(f"{key} graph must be float")
    n, k = int(layer.params["n_experts"]), int(layer.params["top_k"])
    if not 1 <= k <= n:
        raise ValueError(f"top_k must lie in [1, {n}]")
    BatchMode(layer.params.get("batch_mode", "PER_SAMPLE"))
    return _single_output_shape(_moe_subgraph(layer, "expert", in_shape))


def param_shapes(layer: LayerSpec, shapes: dict[str, tuple]) -> list[tuple]:
    k = layer.kind
    if k is LayerKind.CONV:
        cp = layer.conv_params()
        c = shapes[layer.bottoms[0]][1]
        out = [(cp.out_channels, c // cp.groups, cp.kernel_h, cp.kernel_w), (cp.out_channels,)]
    elif k is LayerKind.INNER_PRODUCT:
        x = shapes[layer.bottoms[0]]
        n_out = int(layer.params["num_output"])
        out = [(math.prod(x[1:]), n_out), (n_out,)]
    elif k is LayerKind.MOE:
        n = int(layer.params["n_experts"])
        gate = _moe_subgraph(layer, "gating", shapes[layer.bottoms[0]])
        d = math.prod(_single_output_shape(gate)[1:])
        out = [(n, d), (n, d), (n,)]
    else:
        return []
    return out[: layer.param_set_count]


class MoEBlock:
    """Gating network and N expert networks behind one MOE layer."""

    def __init__(self, layer: LayerSpec, in_shape: tuple, seed: int = 0):
        p = layer.params
        self.n_experts = int(p["n_experts"])
        self.top_k = int(p["top_k"])
        self.batch_mode = BatchMode(p.get("batch_mode", "PER_SAMPLE"))
        self.noise = bool(p.get("noise", False))
        self.noise_seed = int(p.get("seed", 0))
        self.gating = Net(_moe_subgraph(layer, "gating", in_shape), seed=seed)
        expert_spec = _moe_subgraph(layer, "expert", in_shape)
        self.experts = [Net(expert_spec.copy(), seed=seed + 1 + i) for i in range(self.n_experts)]
        self.last_selection = None

    def nets(self) -> list[tuple[str, "Net"]]:
        return [("gating", self.gating)] + [(f"expert{i}", e) for i, e in enumerate(self.experts)]

    def gating_params(self, gates: list[np.ndarray]) -> GatingParams:
        return GatingParams(gates[0], gates[1], gates[2], self.top_k, self.noise, self.noise_seed)

    def config(self) -> MOEConfig:
        return MOEConfig(self.gating.run, [e.run for e in self.experts], self.batch_mode)

    def forward(self, x: np.ndarray, gates: list[np.ndarray]) -> np.ndarray:
        y, sel = moe_forward(x, self.config(), self.gating_params(gates))
        self.last_selection = sel
        return y


class Net:
    """A validated graph with parameters, quantizers and a quantizer mode.

    Parameters are held per layer as tensors in the layer's compute type;
    quantized parameters carry the values of their parameter quantizer.
    MOE gate weights and nested networks always compute in FP32.
    """

    def __init__(self, spec: GraphSpec, weights: Optional[dict] = None, seed: int = 0):
        problems = validate(spec)
        if problems:
            raise GraphError(problems)
        self.spec = spec
        self.order = topological_order(spec)
        self.shapes = infer_shapes(spec)
        self.quantizers = attach_quantizers(spec)
        self.mode = QuantMode.PASSIVE
        self.params: dict[str, list[Tensor]] = {}
        self.moe: dict[str, MoEBlock] = {}
        self._producer = spec.producers()
        rng = np.random.default_rng(seed)
        for layer in self.order:
            shapes = param_shapes(layer, self.shapes)
            if shapes:
                self.set_params(layer.name, [_init_param(rng, s) for s in shapes])
            if layer.kind is LayerKind.MOE:
                in_shape = self.shapes[layer.bottoms[0]]
                self.moe[layer.name] = MoEBlock(layer, in_shape, seed=int(rng.integers(2**31)))
        for name, arrays in (weights or {}).items():
            self.set_params(name, arrays)

    def __repr__(self):
        return f"Net({self.spec.name!r}, layers={len(self.order)}, mode={self.mode.value})"

    # --- parameters --------------------------------------------------------

    def param_dtype(self, layer: LayerSpec) -> DataType:
        return DataType.FP32 if layer.kind is LayerKind.MOE else layer.d_type

    def set_params(self, name: str, arrays):
        """Install float parameter values, converting to the compute type."""
        layer = self.spec.layer(name)
        shapes = param_shapes(layer, self.shapes)
        arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
        if len(arrays) != len(shapes):
            raise ValueError(f"layer '{name}' takes {len(shapes)} parameter sets, got {len(arrays)}")
        dtype = self.param_dtype(layer)
        tensors = []
        for a, shape, q in zip(arrays, shapes, self.quantizers[name].params):
            if a.size != math.prod(shape):
                raise ValueError(f"layer '{name}' parameter shape {a.shape} != {shape}")
            a = a.reshape(shape)
            q.reset()
            q.observe(a)
            qv = q.values(dtype) if dtype.is_quantized else None
            tensors.append(Tensor.from_float(a, dtype, qv))
        self.params[name] = tensors

    def set_param_tensors(self, name: str, tensors: list[Tensor]):
        layer = self.spec.layer(name)
        shapes = param_shapes(layer, self.shapes)
        for t, shape in zip(tensors, shapes):
            if tuple(t.shape) != tuple(shape):
                raise ValueError(f"layer '{name}' parameter shape {t.shape} != {shape}")
        self.params[name] = list(tensors)

    def float_params(self, name: str) -> list[np.ndarray]:
        return [t.to_float() for t in self.params.get(name, [])]

    def iter_nets(self, prefix: str = "") -> Iterator[tuple[str, "Net"]]:
        """This net and all nested MOE nets, with qualified name prefixes."""
        yield prefix, self
        for lname, block in self.moe.items():
            for sub, net in block.nets():
                yield from net.iter_nets(f"{prefix}{lname}/{sub}/")

    # --- quantizer modes -----------------------------------------------------

    def quantized_layers(self) -> list[LayerSpec]:
        return [l for l in self.order if l.mi_type.is_quantized or l.mo_type.is_quantized]

    def set_quant_mode(self, mode):
        mode = QuantMode(mode)
        if mode is QuantMode.QUANTIZED:
            for layer in self.quantized_layers():
                if layer.mo_type.is_quantized:
                    for i in range(len(layer.tops)):
                        self.top_qvals(layer, i)
        if mode is QuantMode.PSEUDO:
            for blob, dt in self.spec.pseudo_quant.items():
                self._blob_qvals(blob, dt)
        self.mode = mode

    @property
    def quant_mode(self) -> QuantMode:
        return self.mode

    @quant_mode.setter
    def quant_mode(self, mode):
        self.set_quant_mode(mode)

    def blob_range(self, blob: str) -> Optional[tuple[float, float]]:
        """Observed range of a blob, looking through quantizer layers."""
        seen = set()
        while blob not in seen:
            seen.add(blob)
            layer = self._producer[blob]
            q = self.quantizers[layer.name].tops[layer.tops.index(blob)]
            if q.has_range:
                return q.range()
            if layer.kind is not LayerKind.QUANTIZER:
                return None
            bq = self.quantizers[layer.name].bottoms[0]
            if bq.has_range:
                return bq.range()
            blob = layer.bottoms[0]
        return None

    def _blob_qvals(self, blob: str, dtype) -> QuantizerValues:
        from ..quantizer import estimate_params

        r = self.blob_range(blob)
        if r is None:
            raise QuantizationError(f"quantizer for blob '{blob}' has no observed range")
        return estimate_params(*r, dtype)

    def top_qvals(self, layer: LayerSpec, i: int = 0, dtype=None) -> QuantizerValues:
        return self._blob_qvals(layer.tops[i], layer.mo_type if dtype is None else dtype)

    def reset_observations(self):
        for lq in self.quantizers.values():
            for q in lq.bottoms + lq.tops:
                q.reset()

    # --- execution -------------------------------------------------------------

    def forward(self, inputs: dict, keep_blobs: bool = False) -> dict[str, Tensor]:
        if self.mode is not QuantMode.QUANTIZED and self.quantized_layers():
            raise QuantizationError("graph has quantized layers; switch to QUANTIZED mode first")
        blobs: dict[str, Tensor] = {}
        for layer in self.order:
            if layer.kind is LayerKind.INPUT:
                tops = [self._input(layer, i, inputs) for i in range(len(layer.tops))]
            else:
                bottoms = [blobs[b] for b in layer.bottoms]
                for b, t in zip(layer.bottoms, bottoms):
                    if t.dtype is not layer.mi_type:
                        raise TypeError(
                            f"dtype mismatch at blob '{b}': layer '{layer.name}' expects "
                            f"{layer.mi_type.value}, got {t.dtype.value}"
                        )
                if self.mode is QuantMode.OBSERVE:
                    for q, t in zip(self.quantizers[layer.name].bottoms, bottoms):
                        q.observe(t)
                tops = self._run_layer(layer, bottoms)
            lq = self.quantizers[layer.name]
            for i, (name, t) in enumerate(zip(layer.tops, tops)):
                if self.mode is QuantMode.OBSERVE:
                    lq.tops[i].observe(t)
                if self.mode is QuantMode.PSEUDO and name in self.spec.pseudo_quant:
                    dt = self.spec.pseudo_quant[name]
                    if t.dtype.is_float:
                        t = pseudo_quantize(t, self._blob_qvals(name, dt), dt)
                blobs[name] = t
        if keep_blobs:
            return blobs
        return {name: blobs[name] for name in self.spec.outputs()}

    def run(self, x) -> np.ndarray:
        """Feed one input array, return the single output as float32."""
        ins, outs = self.spec.inputs(), self.spec.outputs()
        if len(ins) != 1 or len(outs) != 1:
            raise ValueError("run() needs a single-input, single-output graph")
        return self.forward({ins[0]: x})[outs[0]].to_float()

    def _input(self, layer: LayerSpec, i: int, inputs: dict) -> Tensor:
        name = layer.tops[i]
        if name not in inputs:
            raise KeyError(f"missing input '{name}'")
        value = inputs[name]
        declared = tuple(int(d) for d in layer.params["shape"])
        if isinstance(value, Tensor):
            t = value
            if t.dtype is not layer.mo_type:
                raise TypeError(f"input '{name}' has dtype {t.dtype.value}, expected {layer.mo_type.value}")
        else:
            arr = np.asarray(value, dtype=np.float32)
            if arr.ndim == len(declared) - 1 or arr.ndim == 0:
                arr = arr.reshape((-1,) + declared[1:])
            qv = self.top_qvals(layer, i) if layer.mo_type.is_quantized else None
            t = Tensor.from_float(arr, layer.mo_type, qv)
        if tuple(t.shape[1:]) != declared[1:]:
            raise ValueError(f"input '{name}' shape {t.shape} does not match declared {declared}")
        return t

    def _out_qvals(self, layer: LayerSpec) -> Optional[QuantizerValues]:
        return self.top_qvals(layer, 0) if layer.mo_type.is_quantized else None

    def _run_layer(self, layer: LayerSpec, bottoms: list[Tensor]) -> list[Tensor]:
        k = layer.kind
        x = bottoms[0]
        params = self.params.get(layer.name, [])
        if k is LayerKind.CONV:
            bias = params[1] if len(params) > 1 else None
            return [ops.conv_forward(x, params[0], bias, layer.conv_params(), self._out_qvals(layer))]
        if k is LayerKind.INNER_PRODUCT:
            bias = params[1] if len(params) > 1 else None
            return [ops.inner_product(x, params[0], bias, self._out_qvals(layer))]
        if k is LayerKind.RELU:
            if x.dtype.is_quantized:
                return [ops.relu(x, qv_out=self._out_qvals(layer))]
            return [ops.relu_float(x, float(layer.params.get("negative_slope", 0.0)))]
        if k is LayerKind.POOL:
            return [ops.pool_max(x, layer.pool_params())]
        if k is LayerKind.LRN:
            return [ops.lrn(x, layer.lrn_params())]
        if k is LayerKind.SOFTMAX:
            return [ops.softmax(x)]
        if k is LayerKind.DROPOUT:
            return [ops.dropout_inference(x)]
        if k is LayerKind.QUANTIZER:
            return [ops.convert(x, layer.mo_type, self._out_qvals(layer))]
        if k is LayerKind.ELTWISE:
            return [ops.eltwise_sum(bottoms, self._out_qvals(layer))]
        if k is LayerKind.MOE:
            y = self.moe[layer.name].forward(x.to_float(), [t.to_float() for t in params])
            return [Tensor.from_float(y, layer.mo_type, self._out_qvals(layer))]
        raise NotImplementedError(k)

    def calibrate(self, batches) -> "Net":
        """Forward each batch in OBSERVE mode; ranges widen, never reset."""
        previous = self.mode
        self.set_quant_mode(QuantMode.OBSERVE)
        try:
            for batch in batches:
                self.forward(batch if isinstance(batch, dict) else {self.spec.inputs()[0]: batch})
        finally:
            self.mode = previous
        return self

    def to_precision(self, dtype) -> "Net":
        """A twin of this net rewritten to ``dtype``, sharing weights and ranges."""
        from .precision import with_precision
        from .store import apply_model, collect

        twin = Net(with_precision(self.spec, dtype))
        apply_model(twin, collect(self))
        if DataType.parse(dtype).is_quantized:
            twin.set_quant_mode(QuantMode.QUANTIZED)
        return twin

    # --- persistence ---------------------------------------------------------------

    def save(self, path):
        from .store import save_model

        save_model(self, path)

    def load(self, path):
        from .store import apply_model, load_model

        apply_model(self, load_model(path))
        return self


def _init_param(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = math.prod(shape[1:]) if len(shape) > 1 else 1
    scale = math.sqrt(2.0 / max(fan_in, 1)) if len(shape) > 1 else 0.1
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def quantize_param(values, dtype, qv: QuantizerValues) -> Tensor:
    return Tensor(dtype, quantize_array(values, qv, dtype), qv)
