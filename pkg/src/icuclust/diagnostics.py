"""Stability diagnostics for choosing the number of clusters.

Provides the evidence used to pick K: ordered consensus matrices, the
empirical CDF of consensus indices with its area and delta-area series,
the proportion of ambiguous clustering (PAC), a tracking table of
memberships across K, and a deterministic recommendation rule
(PAC-primary with a small-cluster veto).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .consensus import ConsensusMatrix, ConsensusResult
from .hclust import Dendrogram, Partition, agglomerate


@dataclass(frozen=True)
class OrderedMatrix:
    """Consensus-index matrix permuted so clusters form contiguous blocks."""

    permutation: np.ndarray
    matrix: np.ndarray
    block_boundaries: np.ndarray


@dataclass(frozen=True)
class CdfCurve:
    """Empirical CDF of the strict-upper-triangle consensus indices."""

    support: np.ndarray
    cumulative_fraction: np.ndarray
    area_under: float
    n_pairs: int


@dataclass(frozen=True)
class KStability:
    pac: float
    delta_area: float
    smallest_cluster_fraction: float
    never_cosampled_pairs: int
    small_cluster_flag: bool


@dataclass
class StabilityReport:
    per_k: dict
    recommended_k: int
    rationale: list
    pac_bounds: tuple = (0.1, 0.9)
    small_cluster_factor: float = 0.5

    def to_dict(self) -> dict:
        return {
            "per_k": {
                str(k): {
                    "pac": s.pac,
                    "delta_area": s.delta_area,
                    "smallest_cluster_fraction": s.smallest_cluster_fraction,
                    "never_cosampled_pairs": s.never_cosampled_pairs,
                    "small_cluster_flag": s.small_cluster_flag,
                }
                for k, s in self.per_k.items()
            },
            "recommended_k": self.recommended_k,
            "rationale": list(self.rationale),
            "pac_bounds": list(self.pac_bounds),
            "small_cluster_factor": self.small_cluster_factor,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _index_values(matrix) -> np.ndarray:
    """Strict upper-triangle consensus indices from a matrix-like input."""
    if isinstance(matrix, ConsensusMatrix):
        return matrix.upper_triangle_indices()
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError("expected a square matrix")
    iu = np.triu_indices(arr.shape[0], k=1)
    return arr[iu]


def _full_index(matrix) -> np.ndarray:
    if isinstance(matrix, ConsensusMatrix):
        return matrix.index
    return np.asarray(matrix, dtype=np.float64)


def order_matrix(matrix, partition: Partition, tree: Dendrogram | None = None) -> OrderedMatrix:
    """Permute rows/columns cluster by cluster, leaf order within clusters."""
    index = _full_index(matrix)
    n = index.shape[0]
    if partition.n != n:
        raise ValueError("partition size does not match matrix size")
    if tree is None:
        if isinstance(matrix, ConsensusMatrix):
            tree = agglomerate(matrix.dissimilarity(), linkage="average")
        else:
            from .hclust import DistanceMatrix

            iu = np.triu_indices(n, k=1)
            tree = agglomerate(
                DistanceMatrix(n=n, condensed=1.0 - index[iu]), linkage="average"
            )
    leaf_rank = np.empty(n, dtype=np.int64)
    leaf_rank[tree.leaf_order()] = np.arange(n)
    permutation = np.concatenate(
        [
            np.flatnonzero(partition.labels == c)[
                np.argsort(leaf_rank[partition.labels == c], kind="stable")
            ]
            for c in range(partition.k)
        ]
    )
    ordered = index[np.ix_(permutation, permutation)]
    boundaries = np.cumsum(partition.sizes)
    return OrderedMatrix(permutation=permutation, matrix=ordered, block_boundaries=boundaries)


def consensus_cdf(matrix) -> CdfCurve:
    """Empirical CDF over the N(N-1)/2 pairwise consensus indices.

    ``area_under`` is the exact integral of the right-continuous step CDF
    over [0, 1].
    """
    values = _index_values(matrix)
    if values.size < 1:
        raise ValueError("need at least two items for a CDF")
    support, counts = np.unique(values, return_counts=True)
    cumulative = np.cumsum(counts) / values.size
    area = 0.0
    prev_x = 0.0
    prev_f = 0.0
    for x, f in zip(support, cumulative):
        area += prev_f * (x - prev_x)
        prev_x, prev_f = float(x), float(f)
    area += prev_f * (1.0 - prev_x)
    return CdfCurve(
        support=support,
        cumulative_fraction=cumulative,
        area_under=area,
        n_pairs=int(values.size),
    )


def pac(matrix, lower: float = 0.1, upper: float = 0.9) -> float:
    """Proportion of ambiguous clustering: indices strictly inside (lower, upper)."""
    if not 0.0 <= lower < upper <= 1.0:
        raise ValueError("need 0 <= lower < upper <= 1")
    values = _index_values(matrix)
    return float(((values > lower) & (values < upper)).mean())


def delta_area(cdfs: dict) -> dict:
    """Relative change in CDF area as K increases over a contiguous range."""
    ks = sorted(cdfs)
    if ks != list(range(ks[0], ks[-1] + 1)):
        raise ValueError("delta_area requires a contiguous K range")
    out = {}
    prev_area = None
    for k in ks:
        area = cdfs[k].area_under
        if prev_area is None:
            out[k] = area
        else:
            if prev_area == 0.0:
                raise ValueError(f"zero CDF area at K={k - 1}")
            out[k] = (area - prev_area) / prev_area
        prev_area = area
    return out


def tracking_table(partitions: dict, stay_ids=None) -> pd.DataFrame:
    """Item-by-K table of canonical cluster memberships."""
    ks = sorted(partitions)
    n = partitions[ks[0]].n
    for k in ks:
        if partitions[k].n != n:
            raise ValueError("all partitions must cover the same items")
    data = {f"K{k}": partitions[k].labels for k in ks}
    frame = pd.DataFrame(data)
    if stay_ids is not None:
        frame.insert(0, "stay_id", list(stay_ids))
    return frame


RATIONALE_PAC_MIN = "pac_min"
RATIONALE_SMALL_CLUSTER_VETO = "small_cluster_veto_applied"
RATIONALE_ALL_FLAGGED = "all_k_flagged_fallback"


def instability_flags(
    result: ConsensusResult,
    pac_lower: float = 0.1,
    pac_upper: float = 0.9,
    small_cluster_factor: float = 0.5,
) -> StabilityReport:
    """Per-K stability metrics plus a deterministic K recommendation.

    A solution is vetoed when its smallest cluster holds less than
    small_cluster_factor / K of the items. The recommendation is the
    unflagged K with minimal PAC (ties go to the smaller K); if every K
    is flagged, the global PAC minimizer is reported with a fallback code.
    """
    cdfs = {k: consensus_cdf(entry.matrix) for k, entry in result.per_k.items()}
    deltas = delta_area(cdfs)
    per_k = {}
    for k, entry in sorted(result.per_k.items()):
        fraction = float(entry.partition.sizes.min()) / result.n
        per_k[k] = KStability(
            pac=pac(entry.matrix, pac_lower, pac_upper),
            delta_area=float(deltas[k]),
            smallest_cluster_fraction=fraction,
            never_cosampled_pairs=entry.matrix.never_cosampled_pairs,
            small_cluster_flag=fraction < small_cluster_factor / k,
        )

    rationale = []
    candidates = [k for k, s in per_k.items() if not s.small_cluster_flag]
    if candidates:
        if len(candidates) < len(per_k):
            rationale.append(RATIONALE_SMALL_CLUSTER_VETO)
    else:
        candidates = list(per_k)
        rationale.append(RATIONALE_ALL_FLAGGED)
    recommended = candidates[0]
    for k in candidates[1:]:
        if per_k[k].pac < per_k[recommended].pac:
            recommended = k
    rationale.insert(0, RATIONALE_PAC_MIN)

    return StabilityReport(
        per_k=per_k,
        recommended_k=recommended,
        rationale=rationale,
        pac_bounds=(pac_lower, pac_upper),
        small_cluster_factor=small_cluster_factor,
    )
