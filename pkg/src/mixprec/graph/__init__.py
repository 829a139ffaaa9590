from .net import LayerQuantizers, MoEBlock, Net, QuantizationError, attach_quantizers, moe_output_shape
from .planner import MemoryPlan, live_intervals, plan_conflicts, plan_memory
from .precision import with_precision
from .spec import GraphError, GraphSpec, LayerKind, LayerSpec, check, infer_shapes, make_layer, topological_order, validate
from .store import StoreError, apply_model, load_model, payload_bytes, save_model

__all__ = [
    "GraphError",
    "GraphSpec",
    "LayerKind",
    "LayerQuantizers",
    "LayerSpec",
    "MemoryPlan",
    "MoEBlock",
    "Net",
    "QuantizationError",
    "StoreError",
    "apply_model",
    "attach_quantizers",
    "check",
    "infer_shapes",
    "live_intervals",
    "load_model",
    "make_layer",
    "moe_output_shape",
    "payload_bytes",
    "plan_conflicts",
    "plan_memory",
    "save_model",
    "topological_order",
    "validate",
    "with_precision",
]
