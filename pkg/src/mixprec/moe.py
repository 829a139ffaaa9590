"""Mixture-of-experts: noisy gating, top-K selection, mixing, load balance.

The gating network and the experts are plain callables mapping a float32
batch to a float32 batch; the graph runtime wraps nested networks into
them. Gating noise is drawn from a counter-based generator keyed by
(seed, sample index, expert index), so each draw is independent of how
samples are grouped into batches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

# exp() of float32 overflows just above 88.7
_EXP_LIMIT = 80.0


class BatchMode(enum.Enum):
    PER_SAMPLE = "PER_SAMPLE"
    ALL_EXPERTS = "ALL_EXPERTS"


@dataclass
class GatingParams:
    w_a: np.ndarray  # N x D
    w_b: np.ndarray  # N x D
    w_c: np.ndarray  # N
    top_k: int
    noise_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        self.w_a = np.asarray(self.w_a, dtype=np.float32)
        self.w_b = np.asarray(self.w_b, dtype=np.float32)
        self.w_c = np.asarray(self.w_c, dtype=np.float32).reshape(-1)
        n = self.w_a.shape[0]
        if self.w_b.shape != self.w_a.shape or self.w_c.shape != (n,):
            raise ValueError("gating weights disagree on the number of experts")
        if not 1 <= self.top_k <= n:
            raise ValueError(f"top_k must lie in [1, {n}], got {self.top_k}")

    @property
    def n_experts(self) -> int:
        return self.w_a.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w_a.shape[1]


@dataclass
class ExpertSelection:
    indices: np.ndarray  # B x K, descending probability
    weights: np.ndarray  # B x K, rows sum to one


@dataclass
class MOEConfig:
    gating: Callable[[np.ndarray], np.ndarray]
    experts: Sequence[Callable[[np.ndarray], np.ndarray]]
    batch_mode: BatchMode = BatchMode.PER_SAMPLE
    extras: dict = field(default_factory=dict)


def gating_noise(seed: int, sample: int, expert: int) -> tuple[np.float32, np.float32]:
    """(N(0, 1), N(0, 10)) draw for one sample/expert pair."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[int(sample), int(expert), 0, 0])
    e1, e2 = np.random.Generator(bitgen).standard_normal(2)
    return np.float32(e1), np.float32(10.0 * e2)


def gating_logits(x, gp: GatingParams, sample_offset: int = 0) -> np.ndarray:
    """Unnormalised gate values q for each sample (B x N), in float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != gp.feature_dim:
        raise ValueError(f"gating features have dimension {x.shape[1]}, expected {gp.feature_dim}")
    n = gp.n_experts
    q = np.empty((x.shape[0], n), dtype=np.float32)
    for b in range(x.shape[0]):
        z = gp.w_a @ x[b]
        if gp.noise_enabled:
            zb = gp.w_b @ x[b]
            eps = np.array([gating_noise(gp.seed, sample_offset + b, i) for i in range(n)], dtype=np.float32)
            z = z + zb * eps[:, 0] + gp.w_c * eps[:, 1]
        top = float(z.max())
        if top > _EXP_LIMIT:
            z = z - np.float32(top)
        q[b] = np.exp(z.astype(np.float32))
    return q


def gating_probs(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    squeeze = q.ndim == 1
    q = q.reshape(1, -1) if squeeze else q
    if not np.all(np.isfinite(q)) or np.any(q < 0):
        raise ValueError("gate values must be finite and non-negative")
    total = q.sum(axis=1, keepdims=True)
    if np.any(total == 0):
        raise ValueError("degenerate gating: all gate values are zero")
    p = (q / total).astype(np.float32)
    return p[0] if squeeze else p


def select_topk(p, k: int) -> ExpertSelection:
    """The K most probable experts per sample, renormalised.

    Ties go to the lower expert index.
    """
    p = np.asarray(p, dtype=np.float32)
    p = p.reshape(1, -1) if p.ndim == 1 else p
    n = p.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    idx = np.argsort(-p, axis=1, kind="stable")[:, :k]
    chosen = np.take_along_axis(p, idx, axis=1).astype(np.float64)
    weights = chosen / chosen.sum(axis=1, keepdims=True)
    return ExpertSelection(idx, weights.astype(np.float32))


def usage_counts(sel: ExpertSelection, n_experts: int) -> np.ndarray:
    return np.bincount(sel.indices.reshape(-1), minlength=n_experts)


def load_balance_loss(counts, n_experts: int, top_k: int, batch: int) -> float:
    """Mean squared deviation of expert usage rates from K/N (exact)."""
    counts = [int(c) for c in counts]
    if len(counts) != n_experts or any(c < 0 for c in counts):
        raise ValueError("counts must be N non-negative integers")
    if sum(counts) != top_k * batch:
        raise ValueError("inconsistent usage counts: sum(c) != K*B")
    target = Fraction(top_k, n_experts)
    total = sum((target - Fraction(c, batch)) ** 2 for c in counts)
    return float(total / n_experts)


def _mix(weights: np.ndarray, outputs: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.float32(weights[0]) * outputs[0]
    for w, y in zip(weights[1:], outputs[1:]):
        acc = acc + np.float32(w) * y
    return acc.astype(np.float32)


def moe_forward(x, cfg: MOEConfig, gp: GatingParams) -> tuple[np.ndarray, ExpertSelection]:
    """Route every sample through its top-K experts and mix their outputs.

    PER_SAMPLE evaluates only the selected experts, one sample at a time;
    ALL_EXPERTS runs every expert over the whole batch. Both mix in the same
    order, so with row-independent experts the results are bit-identical.
    """
    x = np.asarray(x, dtype=np.float32)
    if len(cfg.experts) != gp.n_experts:
        raise ValueError(f"{len(cfg.experts)} experts configured, gating expects {gp.n_experts}")
    feats = np.asarray(cfg.gating(x), dtype=np.float32)
    sel = select_topk(gating_probs(gating_logits(feats, gp)), gp.top_k)
    batch = x.shape[0]

    if BatchMode(cfg.batch_mode) is BatchMode.ALL_EXPERTS:
        outs = [np.asarray(f(x), dtype=np.float32) for f in cfg.experts]
        shape = outs[0].shape
        if any(o.shape != shape for o in outs):
            raise ValueError("expert output shape mismatch")
        rows = [_mix(sel.weights[b], [outs[i][b] for i in sel.indices[b]]) for b in range(batch)]
    else:
        rows = []
        shape = None
        for b in range(batch):
            ys = [np.asarray(cfg.experts[i](x[b : b + 1]), dtype=np.float32)[0] for i in sel.indices[b]]
            for y in ys:
                if shape is None:
                    shape = y.shape
                elif y.shape != shape:
                    raise ValueError("expert output shape mismatch")
            rows.append(_mix(sel.weights[b], ys))
    return np.stack(rows), sel
