"""Binary model store: parameters at their compute width plus quantizer values.

Layout (little-endian)::

    b"QCNM" | u8 version=1 | u32 layer count
    layer:  str name | u16 quantizer count | quantizer* | u16 param count | param*
    quantizer: str role | 6 x f32 (f_min, f_max, scale, zero, one, 0)
    param:  str name | u8 dtype tag | u8 rank | u32 extent* | 6 x f32 | payload
    str:    u16 byte length | utf-8 bytes

Quantizer values are always FP32. Blob quantizers store the observed range
followed by the derived scale, zero and one for the blob's type (zeros for
float blobs). Float parameters store their observed range and zeros. A
quantizer with no observation stores (+inf, -inf, 0, 0, 0, 0). Nested MOE networks use qualified layer names such
as ``moe/expert0/ip1``.
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..dtypes import DataType
from ..quantizer import ObservationState, Quantizer, QuantizerValues
from ..tensor import Tensor

MAGIC = b"QCNM"
VERSION = 1
_QV = struct.Struct("<6f")


class StoreError(ValueError):
    pass


@dataclass
class ParamRecord:
    name: str
    dtype: DataType
    shape: tuple
    values: tuple  # the six stored f32 fields
    payload: bytes

    def qvals(self) -> Optional[QuantizerValues]:
        if not self.dtype.is_quantized:
            return None
        f_min, f_max, scale, zero, one, _ = self.values
        lo, hi = self.dtype.integer_bounds
        return QuantizerValues(f_min, f_max, scale, int(zero), one, lo, hi)

    def tensor(self) -> Tensor:
        data = np.frombuffer(self.payload, dtype=self.dtype.storage).reshape(self.shape).copy()
        return Tensor(self.dtype, data, self.qvals())


@dataclass
class LayerRecord:
    name: str
    quantizers: dict[str, tuple] = field(default_factory=dict)
    params: list[ParamRecord] = field(default_factory=list)


def _f32(x) -> float:
    return float(np.float32(x))


def _qv_fields(qv: QuantizerValues) -> tuple:
    return (qv.f_min, qv.f_max, qv.scale, float(qv.zero), qv.one, 0.0)


def _state_fields(q) -> tuple:
    if not q.has_range:
        return (math.inf, -math.inf, 0.0, 0.0, 0.0, 0.0)
    return (q.state.seen_min, q.state.seen_max, 0.0, 0.0, 0.0, 0.0)


def _blob_fields(q, dtype: DataType) -> tuple:
    # observed range first, so a reload re-derives identical values
    fields = _state_fields(q)
    if q.has_range and dtype.is_quantized:
        probe = Quantizer(q.name, q.role, q.include_zero)
        probe.state = ObservationState(_f32(fields[0]), _f32(fields[1]), 1)
        qv = probe.values(dtype)
        fields = (fields[0], fields[1], qv.scale, float(qv.zero), qv.one, 0.0)
    return fields


def collect(net) -> list[LayerRecord]:
    records = []
    for prefix, sub in net.iter_nets():
        for layer in sub.order:
            lq = sub.quantizers[layer.name]
            rec = LayerRecord(prefix + layer.name)
            for i, q in enumerate(lq.bottoms):
                rec.quantizers[f"bottom{i}"] = _blob_fields(q, layer.mi_type)
            for i, q in enumerate(lq.tops):
                rec.quantizers[f"top{i}"] = _blob_fields(q, layer.mo_type)
            for t, q in zip(sub.params.get(layer.name, []), lq.params):
                vals = _qv_fields(t.qvals) if t.dtype.is_quantized else _state_fields(q)
                pname = q.name.rsplit("/", 1)[-1]
                rec.params.append(ParamRecord(pname, t.dtype, tuple(t.shape), vals, t.tobytes()))
            records.append(rec)
    return records


def _put_str(out: io.BytesIO, s: str):
    b = s.encode("utf-8")
    out.write(struct.pack("<H", len(b)))
    out.write(b)


def encode(records: list[LayerRecord]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BI", VERSION, len(records)))
    for rec in records:
        _put_str(out, rec.name)
        out.write(struct.pack("<H", len(rec.quantizers)))
        for role, vals in rec.quantizers.items():
            _put_str(out, role)
            out.write(_QV.pack(*vals))
        out.write(struct.pack("<H", len(rec.params)))
        for p in rec.params:
            _put_str(out, p.name)
            out.write(struct.pack("<BB", p.dtype.tag, len(p.shape)))
            out.write(struct.pack(f"<{len(p.shape)}I", *p.shape))
            out.write(_QV.pack(*p.values))
            out.write(p.payload)
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise StoreError("truncated model file")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StoreError(f"corrupt name in model file: {exc}") from None


def decode(raw: bytes) -> list[LayerRecord]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise StoreError("not a model file (bad magic)")
    version, n_layers = r.unpack("<BI")
    if version != VERSION:
        raise StoreError(f"unsupported model file version {version}")
    records = []
    for _ in range(n_layers):
        rec = LayerRecord(r.string())
        (nq,) = r.unpack("<H")
        for _ in range(nq):
            role = r.string()
            rec.quantizers[role] = r.unpack("<6f")
        (np_,) = r.unpack("<H")
        for _ in range(np_):
            name = r.string()
            tag, rank = r.unpack("<BB")
            try:
                dtype = DataType.from_tag(tag)
            except ValueError as exc:
                raise StoreError(str(exc)) from None
            shape = r.unpack(f"<{rank}I")
            vals = r.unpack("<6f")
            payload = r.take(math.prod(shape) * dtype.byte_width)
            rec.params.append(ParamRecord(name, dtype, shape, vals, payload))
        records.append(rec)
    if r.pos != len(raw):
        raise StoreError("trailing bytes after model data")
    return records


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(net, path):
    _atomic_write(Path(path), encode(collect(net)))


def load_model(path) -> list[LayerRecord]:
    return decode(Path(path).read_bytes())


def payload_bytes(records: list[LayerRecord]) -> int:
    """Total parameter payload, headers and quantizer values excluded."""
    return sum(len(p.payload) for rec in records for p in rec.params)


def _restore_state(q, vals):
    f_min, f_max = vals[0], vals[1]
    q.state = ObservationState(f_min, f_max, 1) if f_min <= f_max else ObservationState()


def apply_model(net, records: list[LayerRecord]):
    """Install stored parameters and quantizer ranges into ``net``.

    Parameters saved in the layer's own compute type are installed bit for
    bit; otherwise they are converted through float.
    """
    by_name = {rec.name: rec for rec in records}
    for prefix, sub in net.iter_nets():
        for layer in sub.order:
            rec = by_name.get(prefix + layer.name)
            if rec is None:
                if not sub.params.get(layer.name):
                    continue  # e.g. a quantizer inserted by a precision rewrite
                raise StoreError(f"model file has no entry for layer '{prefix + layer.name}'")
            lq = sub.quantizers[layer.name]
            for i, q in enumerate(lq.bottoms):
                _restore_state(q, rec.quantizers.get(f"bottom{i}", (math.inf, -math.inf)))
            for i, q in enumerate(lq.tops):
                _restore_state(q, rec.quantizers.get(f"top{i}", (math.inf, -math.inf)))
            if not rec.params:
                continue
            want = sub.param_dtype(layer)
            if len(rec.params) != len(lq.params):
                raise StoreError(f"layer '{rec.name}' has {len(rec.params)} parameter sets, expected {len(lq.params)}")
            if all(p.dtype is want for p in rec.params):
                sub.set_param_tensors(layer.name, [p.tensor() for p in rec.params])
                for p, q in zip(rec.params, lq.params):
                    _restore_state(q, p.values)
            else:
                sub.set_params(layer.name, [p.tensor().to_float() for p in rec.params])
