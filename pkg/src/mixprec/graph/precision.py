"""Rewrite a graph to run at a single target precision."""

from __future__ import annotations

from ..dtypes import DataType
from .spec import FP32_ONLY, GraphSpec, LayerKind, LayerSpec, topological_order


def with_precision(spec: GraphSpec, dtype) -> GraphSpec:
    """Copy of ``spec`` with every layer computing in ``dtype``.

    Inputs keep their declared type and FP32-only layers stay FP32. Existing
    QUANTIZER layers adapt to their neighbours; any edge that still crosses
    precisions gets a new QUANTIZER layer.
    """
    dtype = DataType.parse(dtype)
    g = spec.copy()
    order = topological_order(g)
    producers = g.producers()
    consumers = g.consumers()

    for layer in order:
        if layer.kind is LayerKind.QUANTIZER or layer.kind is LayerKind.INPUT:
            continue
        t = DataType.FP32 if layer.kind in FP32_ONLY else dtype
        layer.mi_type = layer.d_type = layer.mo_type = t

    for layer in order:
        if layer.kind is not LayerKind.QUANTIZER:
            continue
        src = producers.get(layer.bottoms[0])
        if src is not None:
            layer.mi_type = layer.d_type = src.mo_type
        wanted = {c.mi_type for c in consumers.get(layer.tops[0], []) if c.kind is not LayerKind.QUANTIZER}
        if len(wanted) == 1:
            layer.mo_type = wanted.pop()

    taken = {l.name for l in g.layers} | set(producers)
    layers: list[LayerSpec] = []
    for layer in g.layers:
        for i, b in enumerate(layer.bottoms):
            src = producers.get(b)
            if src is None or src.mo_type is layer.mi_type:
                continue
            name = _fresh(f"{b}_{layer.mi_type.value.lower()}", taken)
            layers.append(
                LayerSpec(name, LayerKind.QUANTIZER, [b], [name], src.mo_type, src.mo_type, layer.mi_type)
            )
            layer.bottoms[i] = name
        layers.append(layer)
    g.layers = layers
    return g


def _fresh(base: str, taken: set) -> str:
    name, n = base, 1
    while name in taken:
        n += 1
        name = f"{base}_{n}"
    taken.add(name)
    return name
