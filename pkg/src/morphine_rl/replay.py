"""Proportional prioritized replay on a sum-tree.

Leaves hold priorities already raised to ``alpha``, so a leaf is drawn with
probability ``leaf / total``. Sampling is stratified: ``[0, total)`` is cut
into ``batch_size`` equal segments with one uniform draw in each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


class NotReadyError(RuntimeError):
    pass


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


class SumTree:
    """Array-backed binary tree over ``capacity`` leaves (rounded up to a
    power of two). Node 1 is the root, node i has children 2i and 2i+1, and
    leaf j lives at ``capacity + j``. A parallel max-tree tracks the largest
    leaf for new insertions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = _next_pow2(capacity)
        self.nodes = np.zeros(2 * self.capacity)
        self._max = np.zeros(2 * self.capacity)
        self.data: list[Any] = [None] * self.capacity
        self.write_cursor = 0
        self.size = 0

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    @property
    def max_priority(self) -> float:
        return float(self._max[1])

    def leaf(self, index: int) -> float:
        return float(self.nodes[self.capacity + index])

    def set(self, index: int, priority: float) -> None:
        if not 0 <= index < self.capacity:
            raise IndexError(f"leaf index {index} outside 0..{self.capacity - 1}")
        i = self.capacity + index
        self.nodes[i] = priority
        self._max[i] = priority
        i //= 2
        while i >= 1:
            # recompute rather than add deltas so rounding never accumulates
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            self._max[i] = max(self._max[2 * i], self._max[2 * i + 1])
            i //= 2

    def push(self, item: Any) -> int:
        """Store ``item`` at max priority (1.0 when empty), overwriting the oldest."""
        priority = self.max_priority if self.size else 1.0
        idx = self.write_cursor
        self.data[idx] = item
        self.set(idx, priority)
        self.write_cursor = (idx + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return idx

    def extend(self, items: Sequence[Any]) -> np.ndarray:
        """Push every item, equivalent to repeated ``push`` but rebuilt in one pass."""
        n = len(items)
        if n == 0:
            return np.empty(0, dtype=np.int64)
        priority = self.max_priority if self.size else 1.0
        idx = (self.write_cursor + np.arange(n)) % self.capacity
        for i, item in zip(idx.tolist(), items):
            self.data[i] = item
        self.nodes[self.capacity + idx] = priority
        self._max[self.capacity + idx] = priority
        level = self.capacity // 2
        while level >= 1:
            kids = slice(2 * level, 4 * level)
            self.nodes[level:2 * level] = self.nodes[kids][0::2] + self.nodes[kids][1::2]
            self._max[level:2 * level] = np.maximum(self._max[kids][0::2], self._max[kids][1::2])
            level //= 2
        self.write_cursor = int((self.write_cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        return idx[-min(n, self.capacity):]

    def set_many(self, indices: np.ndarray, priorities: np.ndarray) -> None:
        """Batch ``set``; with repeated indices the last priority wins."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return
        if indices.min() < 0 or indices.max() >= self.capacity:
            raise IndexError(f"leaf index outside 0..{self.capacity - 1}")
        last = dict(zip(indices.tolist(), np.asarray(priorities, dtype=np.float64).tolist()))
        nodes = np.fromiter(last.keys(), dtype=np.int64) + self.capacity
        vals = np.fromiter(last.values(), dtype=np.float64)
        self.nodes[nodes] = vals
        self._max[nodes] = vals
        # repeated parents get identical values, so duplicates are harmless
        nodes = nodes // 2
        while nodes[0] >= 1:
            self.nodes[nodes] = self.nodes[2 * nodes] + self.nodes[2 * nodes + 1]
            self._max[nodes] = np.maximum(self._max[2 * nodes], self._max[2 * nodes + 1])
            nodes = nodes // 2

    def find_many(self, mass: np.ndarray) -> np.ndarray:
        """Vectorized ``find`` over an array of masses."""
        mass = np.array(mass, dtype=np.float64)
        i = np.ones(len(mass), dtype=np.int64)
        while i[0] < self.capacity:  # all leaves sit at the same depth
            left = 2 * i
            go_left = (mass < self.nodes[left]) | (self.nodes[left + 1] == 0.0)
            mass = np.where(go_left, mass, mass - self.nodes[left])
            i = np.where(go_left, left, left + 1)
        return i - self.capacity

    def find(self, mass: float) -> int:
        """Leaf whose cumulative-priority interval contains ``mass``."""
        i = 1
        while i < self.capacity:
            left = 2 * i
            if mass < self.nodes[left] or self.nodes[left + 1] == 0.0:
                i = left
            else:
                mass -= self.nodes[left]
                i = left + 1
        return i - self.capacity

    def audit(self) -> float:
        """Largest relative mismatch between an internal node and its children's sum."""
        worst = 0.0
        for i in range(1, self.capacity):
            s = self.nodes[2 * i] + self.nodes[2 * i + 1]
            err = abs(self.nodes[i] - s)
            worst = max(worst, err / abs(s) if s else err)
        return worst


@dataclass
class SampleBatch:
    transitions: list
    tree_indices: np.ndarray
    is_weights: np.ndarray
    probabilities: np.ndarray


def sample(tree: SumTree, batch_size: int, beta: float, rng: np.random.Generator) -> SampleBatch:
    if tree.size < batch_size or tree.size == 0:
        raise NotReadyError(f"buffer holds {tree.size} items, need {batch_size}")
    total = tree.total
    segment = total / batch_size
    u = (np.arange(batch_size) + rng.random(batch_size)) * segment
    idx = tree.find_many(np.minimum(u, np.nextafter(total, 0.0)))
    prios = tree.nodes[tree.capacity + idx]
    probs = prios / total
    w = (tree.size * probs) ** (-beta)
    w /= w.max()
    return SampleBatch([tree.data[i] for i in idx], idx, w, probs)


def priority(td_error: float | np.ndarray, alpha: float = 0.6, eps: float = 1e-3):
    return (np.abs(td_error) + eps) ** alpha


def update_priorities(
    tree: SumTree, indices: Sequence[int], td_errors: Sequence[float], alpha: float = 0.6, eps: float = 1e-3
) -> None:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= tree.size):
        raise IndexError(f"tree index outside the populated range 0..{tree.size - 1}")
    tree.set_many(indices, priority(np.asarray(td_errors, dtype=np.float64), alpha, eps))
