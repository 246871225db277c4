"""Subsampled consensus clustering.

Each iteration draws an item subset and a feature subset (both without
replacement), recomputes distances on the perturbed data, builds one
dendrogram, and cuts it at every K in the configured range. Co–clustering
and co-sampling counts are accumulated into N x N integer matrices; the
consensus index for a pair is cocluster / cosample.

Determinism: every iteration derives its own RNG stream from
(seed, iteration) so results are bit-identical regardless of how
iterations are distributed over worker processes — accumulation is plain
integer addition, which is order-independent.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np
from numba import njit
from scipy.spatial.distance import pdist, squareform

from .cohort import StandardizedMatrix
from .hclust import (
    LINKAGE_CODES,
    Dendrogram,
    DistanceMatrix,
    Partition,
    _agglomerate_core,
    agglomerate,
    cut,
)


@dataclass(frozen=True)
class ConsensusConfig:
    iterations: int = 1000
    item_fraction: float = 0.8
    feature_fraction: float = 0.8
    k_min: int = 2
    k_max: int = 9
    inner_linkage: str = "average"
    consensus_linkage: str = "average"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0.0 < self.item_fraction <= 1.0 or not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("sampling fractions must lie in (0, 1]")
        if self.k_min < 2:
            raise ValueError("k_min must be at least 2")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        for linkage in (self.inner_linkage, self.consensus_linkage):
            if linkage not in LINKAGE_CODES:
                raise ValueError(f"unsupported linkage: {linkage}")

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ConsensusConfig":
        return cls(**payload)


def _subset_size(fraction: float, total: int) -> int:
    """ceil(fraction * total), robust to binary float representation."""
    x = fraction * total
    nearest = round(x)
    if abs(x - nearest) < 1e-6:
        return int(nearest)
    return int(math.ceil(x))


class ConsensusMatrix:
    """Pairwise co-clustering statistics for one value of K."""

    def __init__(self, cocluster: np.ndarray, cosample: np.ndarray, iterations: int):
        if cocluster.shape != cosample.shape or cocluster.shape[0] != cocluster.shape[1]:
            raise ValueError("count matrices must be square and congruent")
        self.cocluster = cocluster
        self.cosample = cosample
        self.iterations = int(iterations)

    @property
    def n(self) -> int:
        return self.cocluster.shape[0]

    @property
    def index(self) -> np.ndarray:
        """Full N x N consensus-index matrix (float32, diagonal forced to 1)."""
        out = np.zeros(self.cocluster.shape, dtype=np.float32)
        np.divide(
            self.cocluster,
            self.cosample,
            out=out,
            where=self.cosample > 0,
            casting="unsafe",
        )
        np.fill_diagonal(out, 1.0)
        return out

    def index_pair(self, i: int, j: int) -> float:
        if i == j:
            return 1.0
        cs = int(self.cosample[i, j])
        if cs == 0:
            return 0.0
        return float(self.cocluster[i, j]) / cs

    def is_never_cosampled(self, i: int, j: int) -> bool:
        return i != j and int(self.cosample[i, j]) == 0

    def upper_triangle_indices(self) -> np.ndarray:
        """Consensus indices of the strict upper triangle (float64)."""
        iu = np.triu_indices(self.n, k=1)
        co = self.cocluster[iu].astype(np.float64)
        cs = self.cosample[iu].astype(np.float64)
        return np.divide(co, cs, out=np.zeros_like(co), where=cs > 0)

    @property
    def never_cosampled_pairs(self) -> int:
        iu = np.triu_indices(self.n, k=1)
        return int((self.cosample[iu] == 0).sum())

    def dissimilarity(self) -> DistanceMatrix:
        """1 - index as a condensed distance matrix for the consensus stage."""
        return DistanceMatrix(n=self.n, condensed=1.0 - self.upper_triangle_indices())


@dataclass
class KConsensus:
    matrix: ConsensusMatrix
    partition: Partition
    tree: Dendrogram


@dataclass
class ConsensusFlags:
    skipped_iterations: list = field(default_factory=list)
    constant_feature_iterations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "skipped_iterations": [int(t) for t in self.skipped_iterations],
            "constant_feature_iterations": [int(t) for t in self.constant_feature_iterations],
        }


@dataclass
class ConsensusResult:
    n: int
    config: ConsensusConfig
    per_k: dict
    flags: ConsensusFlags
    rng_digest: str

    def save(self, path) -> None:
        arrays = {
            "cosample": next(iter(self.per_k.values())).matrix.cosample,
        }
        for k, entry in self.per_k.items():
            arrays[f"cocluster_{k}"] = entry.matrix.cocluster
            arrays[f"labels_{k}"] = entry.partition.labels
            arrays[f"merges_{k}"] = entry.tree.merges
        meta = {
            "n": self.n,
            "config": self.config.to_dict(),
            "flags": self.flags.to_dict(),
            "rng_digest": self.rng_digest,
        }
        arrays["meta"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "ConsensusResult":
        with np.load(path) as payload:
            meta = json.loads(bytes(payload["meta"]).decode("utf-8"))
            config = ConsensusConfig.from_dict(meta["config"])
            cosample = payload["cosample"]
            per_k = {}
            for k in config.k_range:
                matrix = ConsensusMatrix(
                    cocluster=payload[f"cocluster_{k}"],
                    cosample=cosample,
                    iterations=config.iterations,
                )
                labels = payload[f"labels_{k}"]
                partition = Partition(labels=labels, k=k)
                tree = Dendrogram(n_leaves=meta["n"], merges=payload[f"merges_{k}"])
                per_k[k] = KConsensus(matrix=matrix, partition=partition, tree=tree)
        flags = ConsensusFlags(
            skipped_iterations=meta["flags"]["skipped_iterations"],
            constant_feature_iterations=meta["flags"]["constant_feature_iterations"],
        )
        return cls(
            n=meta["n"],
            config=config,
            per_k=per_k,
            flags=flags,
            rng_digest=meta["rng_digest"],
        )


def consensus_index(matrix: ConsensusMatrix, i: int, j: int) -> float:
    """Co-clustering frequency of a pair, conditional on co-sampling."""
    return matrix.index_pair(i, j)


def consensus_partition(matrix: ConsensusMatrix, k: int, linkage: str = "average") -> Partition:
    """Cluster 1 - index hierarchically and cut at k."""
    tree = agglomerate(matrix.dissimilarity(), linkage=linkage)
    return cut(tree, k)


def _counts_dtype(iterations: int):
    return np.uint16 if iterations <= np.iinfo(np.uint16).max else np.uint32


def _iteration_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))


@njit(cache=True)
def _accumulate_upper(acc, items, labels_stack):  # pragma: no cover - via run_consensus
    """Add one iteration's counts into the upper-triangle accumulator.

    ``acc`` has shape (N, N, n_k + 1): one slot per K plus a final
    co-sampling slot. Cuts of one dendrogram are nested, so a pair equal
    at the (kk+1)-th K is equal at all earlier slots; the inner loop
    breaks at the first mismatch.
    """
    m = items.shape[0]
    n_k = labels_stack.shape[0]
    for i in range(m):
        gi = items[i]
        for j in range(i, m):
            gj = items[j]
            lvl = 0
            for kk in range(n_k):
                if labels_stack[kk, i] == labels_stack[kk, j]:
                    lvl += 1
                else:
                    break
            for kk in range(lvl):
                acc[gi, gj, kk] += 1
            acc[gi, gj, n_k] += 1


def _symmetrize(upper: np.ndarray) -> np.ndarray:
    full = upper + upper.T
    np.fill_diagonal(full, np.diag(upper))
    return full


def _run_chunk(args) -> tuple:
    """Worker: accumulate counts for iterations [t_start, t_stop) into an npz."""
    data, config_dict, t_start, t_stop, out_path = args
    config = ConsensusConfig.from_dict(config_dict)
    n, d = data.shape
    m_items = _subset_size(config.item_fraction, n)
    m_feats = max(1, _subset_size(config.feature_fraction, d))
    ks = list(config.k_range)
    acc = np.zeros((n, n, len(ks) + 1), dtype=_counts_dtype(config.iterations))
    inner_code = LINKAGE_CODES[config.inner_linkage]
    skipped = []
    constant = []
    digest = 0
    labels_stack = np.empty((len(ks), m_items), dtype=np.int64)

    for t in range(t_start, t_stop):
        rng = _iteration_rng(config.seed, t)
        items = np.sort(rng.choice(n, size=m_items, replace=False)).astype(np.int64)
        feats = np.sort(rng.choice(d, size=m_feats, replace=False)).astype(np.int64)
        h = hashlib.sha256()
        h.update(np.int64(t).tobytes())
        h.update(items.tobytes())
        h.update(feats.tobytes())
        digest ^= int.from_bytes(h.digest()[:16], "little")

        if m_items < config.k_max:
            skipped.append(t)
            continue
        sub = data[np.ix_(items, feats)]
        if not np.any(sub.max(axis=0) - sub.min(axis=0) > 0.0):
            constant.append(t)

        square = squareform(pdist(sub), checks=False)
        np.fill_diagonal(square, np.inf)
        merges = _agglomerate_core(square, inner_code)
        tree = Dendrogram(n_leaves=m_items, merges=merges)
        for kk, k in enumerate(ks):
            labels_stack[kk] = cut(tree, k).labels
        _accumulate_upper(acc, items, labels_stack)

    np.savez(out_path, acc=acc)
    return out_path, skipped, constant, digest


def run_consensus(
    data,
    config: ConsensusConfig,
    workers: int = 1,
) -> ConsensusResult:
    """Run the full subsampled consensus over a standardized matrix.

    ``workers`` only controls scheduling; the result is required to be
    bit-identical for any worker count.
    """
    if isinstance(data, StandardizedMatrix):
        values = data.matrix
    else:
        values = np.asarray(data, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("data must be two-dimensional")
    n, d = values.shape
    if n < config.k_max:
        raise ValueError(f"need at least k_max={config.k_max} items, got {n}")
    if d < 1:
        raise ValueError("need at least one feature")
    if not np.all(np.isfinite(values)):
        raise ValueError("data contains non-finite values")

    workers = max(1, min(int(workers), config.iterations))
    bounds = np.linspace(0, config.iterations, workers + 1).astype(int)
    final_dtype = _counts_dtype(config.iterations)
    ks = list(config.k_range)

    with tempfile.TemporaryDirectory(prefix="icuclust-consensus-") as tmpdir:
        tasks = [
            (values, config.to_dict(), int(bounds[w]), int(bounds[w + 1]),
             os.path.join(tmpdir, f"chunk_{w}.npz"))
            for w in range(workers)
            if bounds[w] < bounds[w + 1]
        ]
        if len(tasks) <= 1:
            outcomes = [_run_chunk(task) for task in tasks]
        else:
            import multiprocessing as mp

            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
            with ctx.Pool(processes=len(tasks)) as pool:
                outcomes = pool.map(_run_chunk, tasks)

        acc_total = np.zeros((n, n, len(ks) + 1), dtype=_counts_dtype(config.iterations))
        flags = ConsensusFlags()
        digest = 0
        for out_path, skipped, constant, chunk_digest in outcomes:
            with np.load(out_path) as partial:
                acc_total += partial["acc"]
            flags.skipped_iterations.extend(skipped)
            flags.constant_feature_iterations.extend(constant)
            digest ^= chunk_digest
        cosample = _symmetrize(acc_total[:, :, len(ks)]).astype(final_dtype)
        cocluster = {
            k: _symmetrize(acc_total[:, :, kk]).astype(final_dtype) for kk, k in enumerate(ks)
        }
        del acc_total

    flags.skipped_iterations.sort()
    flags.constant_feature_iterations.sort()

    per_k = {}
    for k in ks:
        matrix = ConsensusMatrix(
            cocluster=cocluster[k], cosample=cosample, iterations=config.iterations
        )
        tree = agglomerate(matrix.dissimilarity(), linkage=config.consensus_linkage)
        per_k[k] = KConsensus(matrix=matrix, partition=cut(tree, k), tree=tree)

    return ConsensusResult(
        n=n,
        config=config,
        per_k=per_k,
        flags=flags,
        rng_digest=f"{digest:032x}",
    )


def write_index_csv(matrix: ConsensusMatrix, path) -> None:
    """Export the N x N consensus-index matrix as CSV."""
    np.savetxt(path, matrix.index, fmt="%.6g", delimiter=",")
