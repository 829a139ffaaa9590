"""
Mixture of experts
==================

Four small MLP experts behind an MLP gate; each sample is routed to its
two most probable experts.
"""

import numpy as np

from mixprec.graph import Net
from mixprec.graph.zoo import moe_graph
from mixprec.moe import load_balance_loss, usage_counts

rng = np.random.default_rng(0)
x = rng.standard_normal((16, 8)).astype(np.float32)

per_sample = Net(moe_graph(batch_mode="PER_SAMPLE"), seed=1)
all_experts = Net(moe_graph(batch_mode="ALL_EXPERTS"), seed=1)
y1, y2 = per_sample.run(x), all_experts.run(x)
print("batch modes bit-identical:", y1.tobytes() == y2.tobytes())

sel = per_sample.moe["moe"].last_selection
print("first samples' experts:", sel.indices[:4].tolist())
print("their weights:", sel.weights[:4].astype(float).round(3).tolist())

counts = usage_counts(sel, 4)
print("usage:", counts.tolist(), " load-balance loss:", load_balance_loss(counts, 4, 2, len(x)))
print("uniform usage loss:", load_balance_loss([8, 8, 8, 8], 4, 2, 16))
