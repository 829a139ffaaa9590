"""Liveness-based blob-to-buffer assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .spec import GraphSpec, infer_shapes, topological_order


@dataclass
class MemoryPlan:
    assignment: dict[str, int]
    slot_sizes: list[int]
    intervals: dict[str, tuple[int, int]]
    blob_bytes: dict[str, int]
    reuse_enabled: bool
    pinned: set[str] = field(default_factory=set)

    @property
    def peak_bytes(self) -> int:
        return sum(self.slot_sizes)

    @property
    def slot_count(self) -> int:
        return len(self.slot_sizes)

    def table(self) -> list[tuple[int, int, list[str]]]:
        """(slot, bytes, blobs) rows in slot order."""
        rows = []
        for slot, size in enumerate(self.slot_sizes):
            blobs = [b for b, s in self.assignment.items() if s == slot]
            rows.append((slot, size, blobs))
        return rows


def live_intervals(g: GraphSpec) -> dict[str, tuple[int, int]]:
    """[producer step, last consumer step] per blob, inclusive.

    Graph outputs stay live through the final step.
    """
    order = topological_order(g)
    step = {layer.name: i for i, layer in enumerate(order)}
    last = len(order) - 1
    intervals = {}
    consumers = g.consumers()
    for layer in order:
        for t in layer.tops:
            users = consumers.get(t, [])
            end = max(step[u.name] for u in users) if users else last
            intervals[t] = (step[layer.name], end)
    return intervals


def overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def plan_memory(g: GraphSpec, reuse: bool = True) -> MemoryPlan:
    """Assign each blob a buffer slot.

    Without reuse every blob has its own slot. With reuse, blobs are placed
    in production order into a free slot (best fit, growing the largest free
    slot when none is big enough); a slot is free once every blob in it is
    past its last use. Blobs listed in ``g.inspect`` get private slots.
    """
    shapes = infer_shapes(g)
    dtypes = g.blob_dtypes()
    intervals = live_intervals(g)
    nbytes = {b: math.prod(shapes[b]) * dtypes[b].byte_width for b in intervals}
    pinned = set(g.inspect)
    blobs = sorted(intervals, key=lambda b: (intervals[b][0], list(intervals).index(b)))

    assignment: dict[str, int] = {}
    sizes: list[int] = []
    busy_until: list[float] = []  # last step at which each slot is occupied
    for b in blobs:
        need = nbytes[b]
        start, end = intervals[b]
        slot = None
        if reuse and b not in pinned:
            free = [s for s in range(len(sizes)) if busy_until[s] < start]
            fitting = [s for s in free if sizes[s] >= need]
            if fitting:
                slot = min(fitting, key=lambda s: (sizes[s], s))
            elif free:
                slot = max(free, key=lambda s: (sizes[s], -s))
                sizes[slot] = need
        if slot is None:
            slot = len(sizes)
            sizes.append(need)
            busy_until.append(end)
        if b in pinned or not reuse:
            busy_until[slot] = math.inf
        else:
            busy_until[slot] = end
        assignment[b] = slot
    return MemoryPlan(assignment, sizes, intervals, nbytes, reuse, pinned)


def plan_conflicts(plan: MemoryPlan) -> list[tuple[str, str]]:
    """Pairs of blobs sharing a slot while both live (should be empty)."""
    out = []
    blobs = list(plan.assignment)
    for i, a in enumerate(blobs):
        for b in blobs[i + 1 :]:
            if plan.assignment[a] == plan.assignment[b] and overlaps(plan.intervals[a], plan.intervals[b]):
                out.append((a, b))
    return out
