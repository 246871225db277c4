"""Agglomerative hierarchical clustering with deterministic tie-breaking.

Average linkage (UPGMA) is the primary rule, with single and complete
linkage also supported. The merge order is fully deterministic: at each
step the pair of clusters with the smallest inter-cluster distance is
merged, and ties are broken lexicographically on the pair of smallest
original row indices contained in the two clusters. This makes results
reproducible across platforms and worker counts, including on the
tie-rich dissimilarity matrices produced by the consensus stage.

The hot loop is JIT-compiled with numba; a full greedy pass over an n x n
distance matrix with nearest-neighbour bookkeeping keeps it near O(n^2)
in practice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial.distance import pdist, squareform

LINKAGE_CODES = {"average": 0, "single": 1, "complete": 2}


@dataclass(frozen=True)
class DistanceMatrix:
    """Condensed pairwise distance matrix for n items."""

    n: int
    condensed: np.ndarray

    def __post_init__(self):
        expected = self.n * (self.n - 1) // 2
        if self.condensed.shape != (expected,):
            raise ValueError(
                f"condensed length {self.condensed.shape} does not match n={self.n}"
            )
        if not np.all(np.isfinite(self.condensed)):
            raise ValueError("distances must be finite")
        if np.any(self.condensed < 0):
            raise ValueError("distances must be non-negative")

    def square(self) -> np.ndarray:
        return squareform(self.condensed, checks=False)


@dataclass(frozen=True)
class Dendrogram:
    """Ordered merge list from agglomerative clustering.

    ``merges`` has one row per merge: (left_node, right_node, height,
    merged_size). Leaves are nodes 0..n-1; the t-th merge creates node
    n + t. left_node < right_node within each row.
    """

    n_leaves: int
    merges: np.ndarray

    def __post_init__(self):
        if self.merges.shape != (self.n_leaves - 1, 4):
            raise ValueError("dendrogram must contain exactly n_leaves - 1 merges")

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def leaf_order(self) -> np.ndarray:
        """Leaves in dendrogram display order (iterative traversal of the root)."""
        n = self.n_leaves
        if n == 1:
            return np.array([0], dtype=np.int64)
        children = {n + t: (int(self.merges[t, 0]), int(self.merges[t, 1])) for t in range(n - 1)}
        order = []
        stack = [2 * n - 2]
        while stack:
            node = stack.pop()
            if node < n:
                order.append(node)
            else:
                left, right = children[node]
                stack.append(right)
                stack.append(left)
        return np.array(order, dtype=np.int64)

    def to_json(self) -> str:
        payload = {
            "n_leaves": self.n_leaves,
            "merges": [
                {
                    "left": int(l),
                    "right": int(r),
                    "height": float(h),
                    "size": int(s),
                }
                for l, r, h, s in self.merges
            ],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Dendrogram":
        payload = json.loads(text)
        merges = np.array(
            [[m["left"], m["right"], m["height"], m["size"]] for m in payload["merges"]],
            dtype=np.float64,
        ).reshape(payload["n_leaves"] - 1, 4)
        return cls(n_leaves=payload["n_leaves"], merges=merges)


@dataclass(frozen=True)
class Partition:
    """Assignment of n items to K non-empty clusters, canonically labeled."""

    labels: np.ndarray
    k: int
    sizes: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.sizes is None:
            object.__setattr__(self, "sizes", np.bincount(self.labels, minlength=self.k))
        if len(self.sizes) != self.k or np.any(self.sizes == 0):
            raise ValueError("every cluster must be non-empty")
        if self.sizes.sum() != len(self.labels):
            raise ValueError("cluster sizes must sum to the number of items")

    @property
    def n(self) -> int:
        return len(self.labels)


def pairwise_distances(data: np.ndarray, metric: str = "euclidean") -> DistanceMatrix:
    """Condensed Euclidean distances between the rows of ``data``."""
    if metric != "euclidean":
        raise ValueError(f"unsupported metric: {metric}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array")
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    return DistanceMatrix(n=data.shape[0], condensed=pdist(data, metric="euclidean"))


@njit(cache=True)
def _agglomerate_core(D, linkage_code):  # pragma: no cover - exercised via agglomerate
    """Greedy agglomeration over a square distance matrix (modified in place).

    Cluster slots keep the smallest original row index of their members,
    so first-hit argmin scans implement the lexicographic tie-break.
    Returns (n-1, 4) rows of (left_node, right_node, height, merged_size).
    """
    n = D.shape[0]
    INF = np.inf
    active = np.ones(n, dtype=np.bool_)
    sizes = np.ones(n, dtype=np.int64)
    node_ids = np.arange(n)
    nn_dist = np.empty(n, dtype=np.float64)
    nn_idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = INF
        best_j = -1
        for j in range(n):
            if D[i, j] < best:
                best = D[i, j]
                best_j = j
        nn_dist[i] = best
        nn_idx[i] = best_j
    out = np.empty((n - 1, 4), dtype=np.float64)

    for step in range(n - 1):
        a = -1
        height = INF
        for i in range(n):
            if active[i] and nn_dist[i] < height:
                height = nn_dist[i]
                a = i
        b = nn_idx[a]
        # a < b holds: slots are smallest-member representatives and the
        # first-hit scans above pick the lexicographically smallest pair.
        left = node_ids[a]
        right = node_ids[b]
        if left > right:
            left, right = right, left
        merged_size = sizes[a] + sizes[b]
        out[step, 0] = left
        out[step, 1] = right
        out[step, 2] = height
        out[step, 3] = merged_size

        sa = float(sizes[a])
        sb = float(sizes[b])
        for k in range(n):
            if not active[k] or k == a or k == b:
                continue
            da = D[a, k]
            db = D[b, k]
            if linkage_code == 0:
                d_new = (sa * da + sb * db) / (sa + sb)
            elif linkage_code == 1:
                d_new = da if da < db else db
            else:
                d_new = da if da > db else db
            D[a, k] = d_new
            D[k, a] = d_new
        active[b] = False
        sizes[a] = merged_size
        node_ids[a] = n + step
        nn_dist[b] = INF
        for k in range(n):
            D[b, k] = INF
            D[k, b] = INF
        D[a, a] = INF

        if step == n - 2:
            break

        for k in range(n):
            if not active[k]:
                continue
            if k == a or nn_idx[k] == a or nn_idx[k] == b:
                best = INF
                best_j = -1
                for j in range(n):
                    if D[k, j] < best:
                        best = D[k, j]
                        best_j = j
                nn_dist[k] = best
                nn_idx[k] = best_j
            else:
                dak = D[k, a]
                if dak < nn_dist[k] or (dak == nn_dist[k] and a < nn_idx[k]):
                    nn_dist[k] = dak
                    nn_idx[k] = a
    return out


def agglomerate(dist: DistanceMatrix, linkage: str = "average") -> Dendrogram:
    """Cluster a distance matrix bottom-up with the requested linkage rule."""
    if linkage not in LINKAGE_CODES:
        raise ValueError(f"unsupported linkage: {linkage}")
    if dist.n < 2:
        raise ValueError("at least two items are required")
    D = dist.square().astype(np.float64)
    np.fill_diagonal(D, np.inf)
    merges = _agglomerate_core(D, LINKAGE_CODES[linkage])
    return Dendrogram(n_leaves=dist.n, merges=merges)


@njit(cache=True)
def _cut_labels(merge_left, merge_right, n, n_merges):  # pragma: no cover
    """Raw component labels after applying the first ``n_merges`` merges."""
    parent = np.arange(2 * n - 1)
    for t in range(n_merges):
        node = n + t
        parent[int(merge_left[t])] = node
        parent[int(merge_right[t])] = node
    roots = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        # path compression
        c = i
        while parent[c] != r:
            nxt = parent[c]
            parent[c] = r
            c = nxt
        roots[i] = r
    return roots


def _canonicalize(roots: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel component ids by order of first appearance over the leaves."""
    labels = np.empty(len(roots), dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, r in enumerate(roots):
        r = int(r)
        if r not in mapping:
            mapping[r] = len(mapping)
        labels[i] = mapping[r]
    return labels, len(mapping)


def cut(tree: Dendrogram, k: int) -> Partition:
    """Partition into k clusters by undoing the last k - 1 merges."""
    n = tree.n_leaves
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} leaves")
    roots = _cut_labels(tree.merges[:, 0], tree.merges[:, 1], n, n - k)
    labels, found = _canonicalize(roots)
    if found != k:
        raise AssertionError("cut produced an unexpected number of clusters")
    return Partition(labels=labels, k=k)


def cut_many(tree: Dendrogram, ks) -> dict[int, Partition]:
    """Cut one dendrogram at several values of k (cheaper than repeated cuts)."""
    return {int(k): cut(tree, int(k)) for k in ks}
