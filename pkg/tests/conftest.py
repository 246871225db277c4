"""Shared test helpers: independent oracles and data generators."""

from __future__ import annotations

import numpy as np
import pytest


def naive_agglomerate(square: np.ndarray, linkage: str, snapshot_ks=()):
    """O(n^3) greedy agglomeration oracle, recomputed from raw distances.

    Independent of the package implementation: inter-cluster distances are
    re-derived from the original matrix at every step (mean / min / max over
    cross pairs), the merge pair is the lexicographic minimum of
    (distance, smallest-leaf rep pair), and cluster memberships are captured
    whenever the active cluster count hits one of ``snapshot_ks``.

    Returns (merges, snapshots) where merges rows are
    (left_node, right_node, height, size) and snapshots maps K -> canonical
    labels.
    """
    n = square.shape[0]
    clusters = [[i] for i in range(n)]
    node_ids = list(range(n))
    snapshots = {}

    def record(k):
        labels = np.empty(n, dtype=np.int64)
        for idx, members in enumerate(clusters):
            for leaf in members:
                labels[leaf] = idx
        canon = {}
        out = np.empty(n, dtype=np.int64)
        for leaf in range(n):
            raw = labels[leaf]
            if raw not in canon:
                canon[raw] = len(canon)
            out[leaf] = canon[raw]
        snapshots[k] = out

    if n in snapshot_ks:
        record(n)
    merges = []
    step = 0
    while len(clusters) > 1:
        best_key = None
        best_pair = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                block = square[np.ix_(clusters[i], clusters[j])]
                if linkage == "average":
                    d = float(block.mean())
                elif linkage == "single":
                    d = float(block.min())
                else:
                    d = float(block.max())
                rep_i, rep_j = min(clusters[i]), min(clusters[j])
                key = (d, min(rep_i, rep_j), max(rep_i, rep_j))
                if best_key is None or key < best_key:
                    best_key = key
                    best_pair = (i, j)
        i, j = best_pair
        left, right = node_ids[i], node_ids[j]
        if left > right:
            left, right = right, left
        merged = sorted(clusters[i] + clusters[j])
        merges.append((left, right, best_key[0], len(merged)))
        keep_i = min(i, j)
        drop = max(i, j)
        clusters[keep_i] = merged
        node_ids[keep_i] = n + step
        del clusters[drop]
        del node_ids[drop]
        step += 1
        if len(clusters) in snapshot_ks:
            record(len(clusters))
    return np.array(merges, dtype=np.float64), snapshots


def planted_blobs(n: int, d: int, k: int, separation: float, seed: int):
    """Spherical unit-variance clusters at mutually equidistant centroids."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, d))
    for c in range(k):
        centers[c, c % d] = separation / np.sqrt(2.0)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    labels = np.repeat(np.arange(k), sizes)
    labels = labels[rng.permutation(n)]
    data = centers[labels] + rng.normal(0.0, 1.0, size=(n, d))
    return data, labels


@pytest.fixture
def rng():
    return np.random.default_rng(20240612)
