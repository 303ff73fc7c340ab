"""Per-element attention targets: a BFS-local prefix plus random connections."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .mesh import bfs_order, neighbor_lists

LOCAL_TO_RANDOM = 4


def pattern_sizes(n, s_override=None):
    """Return ``(s, local_count, random_count)`` for ``n`` elements."""
    s = int(s_override) if s_override is not None else math.ceil(math.sqrt(n))
    s = max(1, min(s, n))
    random_count = math.floor(s / (LOCAL_TO_RANDOM + 1) + 0.5)
    return s, s - random_count, random_count


@dataclass(frozen=True)
class SparsityPattern:
    """Padded attention targets.

    ``index[i, :]`` holds the keys of element ``i`` with ``index[i, 0] == i``;
    slots beyond the row's length are masked out and point at ``i``.
    """

    index: np.ndarray
    mask: np.ndarray
    s: int
    local_count: int
    random_count: int
    truncated: np.ndarray

    @property
    def n(self):
        return self.index.shape[0]

    def targets(self, i):
        return self.index[i, self.mask[i]]

    def lengths(self):
        return self.mask.sum(axis=1)

    def shifted(self, offset):
        return SparsityPattern(self.index + offset, self.mask, self.s, self.local_count,
                               self.random_count, self.truncated)

    def to_json(self, element_kind):
        return json.dumps({
            "element_kind": element_kind,
            "s": self.s,
            "patterns": [self.targets(i).tolist() for i in range(self.n)],
        })


def bfs_prefixes(neighbors, local_count):
    return [bfs_order(neighbors, i, local_count) for i in range(len(neighbors))]


def _random_fill(rng, n, prefix, count):
    if count <= 0:
        return []
    taken = set(prefix)
    free = n - len(taken)
    if free <= count:
        rest = np.setdiff1d(np.arange(n), prefix)
        return rng.permutation(rest).tolist()
    out = []
    while len(out) < count:
        for c in rng.integers(0, n, size=2 * (count - len(out)) + 2).tolist():
            if c not in taken:
                taken.add(c)
                out.append(c)
                if len(out) == count:
                    break
    return out


def build_pattern(adjacency, n=None, s_override=None, seed=0, prefixes=None):
    """Sparsity pattern for the elements of one kind.

    Parameters
    ----------
    adjacency : sparse matrix or list of neighbor lists
        Element adjacency of the kind being attended over.
    n : int, optional
        Element count; inferred from ``adjacency`` when omitted.
    s_override : int, optional
        Pattern size; defaults to ``ceil(sqrt(n))``.
    seed : int or numpy Generator
        Drives the random connections only; the BFS prefix is deterministic.
    prefixes : list, optional
        Precomputed BFS prefixes (see :func:`bfs_prefixes`) for reuse across epochs.
    """
    neighbors = adjacency if isinstance(adjacency, list) else neighbor_lists(adjacency)
    n = len(neighbors) if n is None else n
    if n < 1:
        raise ValueError("pattern needs at least one element")
    s, local_count, random_count = pattern_sizes(n, s_override)
    dense = s >= n
    if prefixes is None:
        prefixes = bfs_prefixes(neighbors, local_count)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    index = np.repeat(np.arange(n, dtype=np.int64)[:, None], s, axis=1)
    mask = np.zeros((n, s), dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    for i in range(n):
        prefix = prefixes[i][:local_count]
        extra = n - len(prefix) if dense else random_count
        row = prefix + _random_fill(rng, n, prefix, extra)
        row = row[:s]
        index[i, :len(row)] = row
        mask[i, :len(row)] = True
        truncated[i] = len(row) < s
    return SparsityPattern(index, mask, s, local_count, random_count, truncated)


def self_pattern(n):
    """Every element attends only to itself."""
    return SparsityPattern(np.arange(n, dtype=np.int64)[:, None], np.ones((n, 1), dtype=bool),
                           1, 1, 0, np.zeros(n, dtype=bool))


def full_pattern(n):
    """Every element attends to all elements, self first."""
    idx = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        idx[i, 0] = i
        idx[i, 1:] = np.concatenate([np.arange(i), np.arange(i + 1, n)])
    return SparsityPattern(idx, np.ones((n, n), dtype=bool), n, n, 0, np.zeros(n, dtype=bool))


def concat_patterns(patterns, offsets):
    """Stack patterns of disjoint meshes; widths are padded with masked self slots."""
    width = max(p.index.shape[1] for p in patterns)
    rows, masks, trunc = [], [], []
    for p, off in zip(patterns, offsets):
        idx = p.index + off
        m = p.mask
        if idx.shape[1] < width:
            pad = width - idx.shape[1]
            idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
            m = np.concatenate([m, np.zeros((len(m), pad), dtype=bool)], axis=1)
        rows.append(idx)
        masks.append(m)
        trunc.append(p.truncated)
    return SparsityPattern(np.concatenate(rows), np.concatenate(masks), width,
                           max(p.local_count for p in patterns),
                           max(p.random_count for p in patterns), np.concatenate(trunc))
