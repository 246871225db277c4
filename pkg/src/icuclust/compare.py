"""Comparing clustering solutions within and across studies.

Partition agreement is measured with the adjusted Rand index and
normalized mutual information. Cross-study similarity works on cluster
profiles: scaled Euclidean distances between profile vectors, an optimal
one-to-one matching, and an exhaustive many-to-one mapping search that
merges source clusters (size-weighted) onto target clusters. A reference
profile set from the prior six-cluster study is bundled for comparison.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.optimize import linear_sum_assignment

from .characterize import ClusterProfile


def _contingency(p_labels, q_labels) -> np.ndarray:
    p_labels = np.asarray(p_labels)
    q_labels = np.asarray(q_labels)
    if p_labels.shape != q_labels.shape:
        raise ValueError("partitions must cover the same items")
    _, p_idx = np.unique(p_labels, return_inverse=True)
    _, q_idx = np.unique(q_labels, return_inverse=True)
    table = np.zeros((p_idx.max() + 1, q_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (p_idx, q_idx), 1)
    return table


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(p_labels, q_labels) -> float:
    """Adjusted Rand index between two partitions (chance-corrected, in [-1, 1])."""
    table = _contingency(p_labels, q_labels)
    n = table.sum()
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def nmi(p_labels, q_labels) -> float:
    """Normalized mutual information (arithmetic-mean normalization, in [0, 1])."""
    table = _contingency(p_labels, q_labels)
    n = table.sum()
    pi = table.sum(axis=1) / n
    pj = table.sum(axis=0) / n
    h_p = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    h_q = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    if h_p == 0.0 and h_q == 0.0:
        return 1.0
    if h_p == 0.0 or h_q == 0.0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(pi, pj)[nz]
    mi = float(np.sum(pij * np.log(pij / outer)))
    value = mi / ((h_p + h_q) / 2.0)
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True)
class MappingReport:
    """Result of a profile-matching search between two cluster solutions."""

    direction: str  # one_to_one | many_to_one
    assignment: dict
    total_cost: float
    pair_distances: dict

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "assignment": {str(k): int(v) for k, v in self.assignment.items()},
            "total_cost": self.total_cost,
            "pair_distances": {str(k): float(v) for k, v in self.pair_distances.items()},
        }


def shared_features(a: ClusterProfile, b: ClusterProfile, features=None) -> list[str]:
    names = [f for f in a.values if f in b.values]
    if features is not None:
        names = [f for f in names if f in set(features)]
    if not names:
        raise ValueError("profiles share no features to compare on")
    return names


def profile_distance(a: ClusterProfile, b: ClusterProfile, scale: dict, features=None) -> float:
    """Euclidean distance between profile vectors after per-feature scaling.

    Features with zero or missing scale fall back to a unit scale.
    """
    names = shared_features(a, b, features)
    total = 0.0
    for name in names:
        s = scale.get(name, 1.0)
        if not (isinstance(s, (int, float)) and math.isfinite(s)) or s <= 0.0:
            s = 1.0
        diff = (a.value(name) - b.value(name)) / s
        total += diff * diff
    return math.sqrt(total)


def best_one_to_one(src, dst, scale: dict, features=None) -> MappingReport:
    """Injective assignment of source to target profiles minimizing total distance."""
    if not 1 <= len(src) <= len(dst) <= 9:
        raise ValueError("one-to-one search requires |src| <= |dst| <= 9")
    cost = np.array(
        [[profile_distance(s, t, scale, features) for t in dst] for s in src],
        dtype=np.float64,
    )
    rows, cols = linear_sum_assignment(cost)
    assignment = {src[r].cluster_id: dst[c].cluster_id for r, c in zip(rows, cols)}
    pair = {src[r].cluster_id: float(cost[r, c]) for r, c in zip(rows, cols)}
    return MappingReport(
        direction="one_to_one",
        assignment=assignment,
        total_cost=float(cost[rows, cols].sum()),
        pair_distances=pair,
    )


def merge_profiles(profiles, cluster_id: int = -1) -> ClusterProfile:
    """Size-fraction-weighted mean of several profiles."""
    weights = np.array([p.size_fraction for p in profiles], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("cannot merge profiles with zero total size")
    weights = weights / weights.sum()
    names = list(profiles[0].values)
    values = {
        name: float(sum(w * p.value(name) for w, p in zip(weights, profiles)))
        for name in names
    }
    return ClusterProfile(
        cluster_id=cluster_id,
        size_fraction=float(sum(p.size_fraction for p in profiles)),
        values=values,
    )


def best_many_to_one(
    src, dst, scale: dict, features=None, max_enumeration: int = 1_000_000
) -> MappingReport:
    """Exhaustive search over surjections src -> dst.

    Source profiles mapped to a common target are merged by
    size-fraction-weighted mean before measuring the distance to that
    target; the total cost sums over targets. Ties resolve to the
    lexicographically smallest assignment.
    """
    n_src, n_dst = len(src), len(dst)
    if n_dst > n_src:
        raise ValueError("many-to-one search requires |dst| <= |src|")
    if n_dst**n_src > max_enumeration:
        raise ValueError(
            f"enumeration bound exceeded: {n_dst}^{n_src} > {max_enumeration}"
        )
    all_targets = set(range(n_dst))
    best_map = None
    best_cost = math.inf
    best_pairs: dict = {}
    for mapping in itertools.product(range(n_dst), repeat=n_src):
        if set(mapping) != all_targets:
            continue
        cost = 0.0
        pairs = {}
        for target in range(n_dst):
            group = [src[i] for i in range(n_src) if mapping[i] == target]
            dist = profile_distance(merge_profiles(group), dst[target], scale, features)
            pairs[target] = dist
            cost += dist
        if cost < best_cost:
            best_cost = cost
            best_map = mapping
            best_pairs = pairs
    assignment = {src[i].cluster_id: dst[best_map[i]].cluster_id for i in range(n_src)}
    pair_distances = {dst[t].cluster_id: best_pairs[t] for t in range(n_dst)}
    return MappingReport(
        direction="many_to_one",
        assignment=assignment,
        total_cost=float(best_cost),
        pair_distances=pair_distances,
    )


@dataclass(frozen=True)
class ReferenceFeature:
    name: str
    kind: str
    unit: str
    values: tuple
    comparable: bool = True


class ReferenceProfileSet:
    """Published cluster profiles from another study, values as printed."""

    def __init__(self, study: str, size_fractions, features, feature_map=None):
        self.study = study
        self.size_fractions = tuple(float(f) for f in size_fractions)
        self.features = tuple(features)
        self.feature_map = dict(feature_map or {})
        n = len(self.size_fractions)
        for f in self.features:
            if len(f.values) != n:
                raise ValueError(f"feature {f.name} does not cover all {n} clusters")
        if abs(sum(self.size_fractions) - 1.0) > 0.005:
            raise ValueError("reference size fractions are not close to 1")

    @property
    def n_clusters(self) -> int:
        return len(self.size_fractions)

    def value(self, cluster_index: int, feature: str) -> float:
        for f in self.features:
            if f.name == feature:
                return f.values[cluster_index]
        raise KeyError(feature)

    def local_name(self, name: str) -> str:
        return self.feature_map.get(name, name)

    def to_profiles(self, include_redacted: bool = False, exclude=()) -> list[ClusterProfile]:
        """Convert published values to local units/names (percent -> fraction)."""
        exclude = set(exclude)
        profiles = []
        for c in range(self.n_clusters):
            values = {}
            for f in self.features:
                if not f.comparable and not include_redacted:
                    continue
                local = self.local_name(f.name)
                if local in exclude:
                    continue
                v = float(f.values[c])
                if f.unit == "percent":
                    v /= 100.0
                values[local] = v
            profiles.append(
                ClusterProfile(cluster_id=c, size_fraction=self.size_fractions[c], values=values)
            )
        return profiles


def _reference_checksum(payload: dict) -> str:
    body = {k: payload[k] for k in ("study", "size_fractions", "features", "feature_map")}
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_reference_profiles_from(payload: dict) -> ReferenceProfileSet:
    checksum = payload.get("sha256")
    if checksum != _reference_checksum(payload):
        raise ValueError("reference profile bundle failed its checksum")
    features = [
        ReferenceFeature(
            name=f["name"],
            kind=f["kind"],
            unit=f.get("unit", ""),
            values=tuple(float(v) for v in f["values"]),
            comparable=bool(f.get("comparable", True)),
        )
        for f in payload["features"]
    ]
    return ReferenceProfileSet(
        study=payload["study"],
        size_fractions=payload["size_fractions"],
        features=features,
        feature_map=payload.get("feature_map", {}),
    )


def load_reference_profiles(tag: str = "vranas2017") -> ReferenceProfileSet:
    """Load a bundled reference profile set (currently only vranas2017)."""
    if tag != "vranas2017":
        raise ValueError(f"unknown reference profile set: {tag!r}")
    text = resources.files("icuclust.data").joinpath("vranas2017_profiles.json").read_text(
        encoding="utf-8"
    )
    return load_reference_profiles_from(json.loads(text))


def compare_profiles_to_reference(
    local_profiles,
    reference: ReferenceProfileSet,
    scale: dict,
    include_code_status: bool = True,
    include_redacted: bool = False,
) -> dict:
    """One-to-one and many-to-one matching of local profiles against a reference.

    The one-to-one direction maps local clusters into the (larger or
    equal) reference set; the many-to-one direction maps reference
    clusters onto local ones. ``include_code_status=False`` drops the DNR
    feature, whose definition differs across studies.
    """
    exclude = () if include_code_status else ("dnr",)
    ref_profiles = reference.to_profiles(include_redacted=include_redacted, exclude=exclude)
    local = local_profiles
    if not include_code_status:
        local = [
            ClusterProfile(
                cluster_id=p.cluster_id,
                size_fraction=p.size_fraction,
                values={k: v for k, v in p.values.items() if k != "dnr"},
            )
            for p in local_profiles
        ]
    report = {"reference": reference.study}
    if len(local) <= len(ref_profiles):
        report["one_to_one"] = best_one_to_one(local, ref_profiles, scale).to_dict()
        report["many_to_one"] = best_many_to_one(ref_profiles, local, scale).to_dict()
    else:
        report["one_to_one"] = best_one_to_one(ref_profiles, local, scale).to_dict()
        report["many_to_one"] = best_many_to_one(local, ref_profiles, scale).to_dict()
    return report
