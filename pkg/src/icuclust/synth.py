"""Synthetic cohorts with planted cluster structure.

Continuous features draw from per-cluster normals, binaries from
Bernoullis, with cluster sizes fixed by largest-remainder rounding of the
configured fractions. When the cohort-convention feature names are
present, a coherence layer keeps rows internally consistent (a single
discharge destination per survivor, no readmission or discharge for
in-hospital deaths, ICU length of stay within the total), so a clean spec
passes the consistency checks untouched. A contradiction switch plants
rows that exercise each correction rule, with exact counts.

Generated values are non-clinical scaffolding for validating the
pipeline, not simulations of real patients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
import pandas as pd

from .cohort import CohortTable, FeatureSchema
from .hclust import Partition


@dataclass(frozen=True)
class ContinuousParam:
    mean: float
    stddev: float
    minimum: float | None = None
    maximum: float | None = None

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("stddev must be non-negative")


@dataclass(frozen=True)
class BinaryParam:
    probability: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


@dataclass(frozen=True)
class ClusterSpec:
    fraction: float
    features: dict

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("cluster fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Contradictions:
    """Row counts to plant for each consistency-check rule."""

    los_rows: int = 0
    discharge_rows: int = 0
    readmission_rows: int = 0

    @property
    def total(self) -> int:
        return self.los_rows + self.discharge_rows + self.readmission_rows


@dataclass(frozen=True)
class CohortSpec:
    n: int
    seed: int
    clusters: tuple
    schema: FeatureSchema
    severity_coupling: bool = False

    def __post_init__(self):
        if self.n < len(self.clusters):
            raise ValueError("n must be at least the number of clusters")
        total = sum(c.fraction for c in self.clusters)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"cluster fractions must sum to 1, got {total}")

    def to_dict(self) -> dict:
        clusters = []
        for c in self.clusters:
            feats = {}
            for name, param in c.features.items():
                if isinstance(param, ContinuousParam):
                    entry = {"kind": "normal", "mean": param.mean, "stddev": param.stddev}
                    if param.minimum is not None:
                        entry["minimum"] = param.minimum
                    if param.maximum is not None:
                        entry["maximum"] = param.maximum
                else:
                    entry = {"kind": "bernoulli", "probability": param.probability}
                feats[name] = entry
            clusters.append({"fraction": c.fraction, "features": feats})
        return {
            "n": self.n,
            "seed": self.seed,
            "severity_coupling": self.severity_coupling,
            "schema": self.schema.to_dict(),
            "clusters": clusters,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CohortSpec":
        schema = FeatureSchema.from_dict(payload["schema"])
        clusters = []
        for c in payload["clusters"]:
            feats = {}
            for name, entry in c["features"].items():
                if entry["kind"] == "normal":
                    feats[name] = ContinuousParam(
                        mean=float(entry["mean"]),
                        stddev=float(entry["stddev"]),
                        minimum=entry.get("minimum"),
                        maximum=entry.get("maximum"),
                    )
                elif entry["kind"] == "bernoulli":
                    feats[name] = BinaryParam(probability=float(entry["probability"]))
                else:
                    raise ValueError(f"unknown feature param kind: {entry['kind']!r}")
            clusters.append(ClusterSpec(fraction=float(c["fraction"]), features=feats))
        return cls(
            n=int(payload["n"]),
            seed=int(payload["seed"]),
            clusters=tuple(clusters),
            schema=schema,
            severity_coupling=bool(payload.get("severity_coupling", False)),
        )


def load_cohort_spec(path) -> CohortSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return CohortSpec.from_dict(json.load(fh))


def save_cohort_spec(spec: CohortSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def largest_remainder_sizes(fractions, n: int) -> np.ndarray:
    """Integer cluster sizes summing to n, by largest-remainder rounding."""
    fractions = np.asarray(fractions, dtype=np.float64)
    raw = fractions * n
    sizes = np.floor(raw).astype(np.int64)
    shortfall = n - sizes.sum()
    if shortfall:
        remainders = raw - sizes
        # stable argsort descending; ties go to the lower cluster index
        order = np.argsort(-remainders, kind="stable")
        sizes[order[:shortfall]] += 1
    if (sizes == 0).any():
        raise ValueError("a cluster fraction rounded to zero rows")
    return sizes


# Feature names that activate the coherence layer.
_MORT = "hospital_mortality"
_READMIT = "readmission_30d"
_DISCHARGE_BINARIES = ("discharged_home", "discharged_skilled_facility", "discharged_hospice")
_DISCHARGE_CATEGORIES = ("home", "skilled_facility", "hospice")
_DISCHARGE_LOCATION = "discharge_location"
_TOTAL_LOS = "total_los"
_ICU_LOS = "icu_los"

# Outcome flags driven by the latent severity rank when coupling is on.
# In-hospital death and DNR occupy the low-u (most severe) end; death
# within 30 days fills the high-u end, so post-discharge deaths land on
# the surviving members of high-mortality clusters.
_SEVERITY_LOW_U = ("dnr", _MORT)
_SEVERITY_HIGH_U = ("death_within_30d",)


def _cluster_param(spec: CohortSpec, cluster: int, name: str):
    return spec.clusters[cluster].features.get(name)


def generate(
    spec: CohortSpec, contradictions: Contradictions | None = None
) -> tuple[CohortTable, Partition]:
    """Draw a cohort table plus its ground-truth partition."""
    rng = np.random.default_rng(spec.seed)
    k = len(spec.clusters)
    sizes = largest_remainder_sizes([c.fraction for c in spec.clusters], spec.n)
    cluster_of = np.repeat(np.arange(k), sizes)[rng.permutation(spec.n)]

    schema_names = spec.schema.names
    has_trio = all(
        name in schema_names for name in _DISCHARGE_BINARIES
    ) and _MORT in schema_names
    coherent_readmit = has_trio and _READMIT in schema_names
    coupled = [
        name
        for name in _SEVERITY_LOW_U + _SEVERITY_HIGH_U
        if spec.severity_coupling and name in schema_names
    ]
    derive_icu = (
        _ICU_LOS in schema_names
        and _TOTAL_LOS in schema_names
        and all(_cluster_param(spec, c, _ICU_LOS) is None for c in range(k))
    )
    skip = set(coupled)
    if has_trio:
        skip.update(_DISCHARGE_BINARIES)
        skip.add(_DISCHARGE_LOCATION)
    if coherent_readmit:
        skip.add(_READMIT)
    if derive_icu:
        skip.add(_ICU_LOS)

    columns: dict[str, np.ndarray] = {}
    for f in spec.schema.features:
        if f.name in skip:
            continue
        if f.kind == "categorical":
            columns[f.name] = np.full(spec.n, None, dtype=object)
            continue
        out = np.empty(spec.n, dtype=np.float64)
        for c in range(k):
            mask = cluster_of == c
            param = _cluster_param(spec, c, f.name)
            if param is None:
                raise ValueError(
                    f"cluster {c} has no generator parameters for feature {f.name!r}"
                )
            m = int(mask.sum())
            if f.kind == "binary":
                if not isinstance(param, BinaryParam):
                    raise ValueError(f"feature {f.name!r} expects a Bernoulli parameter")
                out[mask] = (rng.random(m) < param.probability).astype(np.float64)
            else:
                if not isinstance(param, ContinuousParam):
                    raise ValueError(f"feature {f.name!r} expects a normal parameter")
                draws = rng.normal(param.mean, param.stddev, size=m)
                lo = param.minimum if param.minimum is not None else -np.inf
                hi = param.maximum if param.maximum is not None else np.inf
                out[mask] = np.clip(draws, lo, hi)
        columns[f.name] = out

    severity_u = None
    if coupled:
        # one latent rank per row (low u = more severe); low-u flags fire
        # iff u < p, high-u flags iff u >= 1 - p, so marginals stay exact
        severity_u = rng.random(spec.n)
        for name in coupled:
            out = np.zeros(spec.n, dtype=np.float64)
            for c in range(k):
                mask = cluster_of == c
                param = _cluster_param(spec, c, name)
                if param is None or not isinstance(param, BinaryParam):
                    raise ValueError(f"cluster {c} needs a Bernoulli parameter for {name!r}")
                if name in _SEVERITY_HIGH_U:
                    hit = severity_u[mask] >= 1.0 - param.probability
                else:
                    hit = severity_u[mask] < param.probability
                out[mask] = hit.astype(np.float64)
            columns[name] = out

    if has_trio:
        mort = columns[_MORT]
        location = np.full(spec.n, None, dtype=object)
        binaries = {name: np.zeros(spec.n, dtype=np.float64) for name in _DISCHARGE_BINARIES}
        # severity-ordered destinations among survivors when coupling is on:
        # hospice takes the most severe band, then skilled facility, then home
        u = severity_u if severity_u is not None else rng.random(spec.n)
        for c in range(k):
            mask = (cluster_of == c) & (mort == 0.0)
            p_mort = _cluster_param(spec, c, _MORT)
            p_m = p_mort.probability if isinstance(p_mort, BinaryParam) else 0.0
            survive = max(1.0 - p_m, 1e-12)
            probs = []
            order = (
                ("discharged_hospice", "discharged_skilled_facility", "discharged_home")
                if severity_u is not None
                else _DISCHARGE_BINARIES
            )
            for name in order:
                param = _cluster_param(spec, c, name)
                if param is None or not isinstance(param, BinaryParam):
                    raise ValueError(f"cluster {c} needs a Bernoulli parameter for {name!r}")
                probs.append(param.probability / survive)
            total = sum(probs)
            if total > 1.0:
                probs = [p / total for p in probs]
            if severity_u is not None:
                # survivors have u in [p_m, 1); rescale to [0, 1) band position
                pos = (u[mask] - p_m) / survive
            else:
                pos = u[mask]
            edges = np.cumsum(probs)
            slot = np.searchsorted(edges, pos, side="right")
            categories = dict(zip(_DISCHARGE_BINARIES, _DISCHARGE_CATEGORIES))
            for j, name in enumerate(order):
                hit = mask.copy()
                hit[mask] = slot == j
                binaries[name][hit] = 1.0
                location[hit] = categories[name]
        for name in _DISCHARGE_BINARIES:
            columns[name] = binaries[name]
        if _DISCHARGE_LOCATION in schema_names:
            columns[_DISCHARGE_LOCATION] = location

    if coherent_readmit:
        mort = columns[_MORT]
        out = np.zeros(spec.n, dtype=np.float64)
        u = rng.random(spec.n)
        for c in range(k):
            mask = (cluster_of == c) & (mort == 0.0)
            param = _cluster_param(spec, c, _READMIT)
            if param is None or not isinstance(param, BinaryParam):
                raise ValueError(f"cluster {c} needs a Bernoulli parameter for {_READMIT!r}")
            p_mort = _cluster_param(spec, c, _MORT)
            survive = 1.0 - (p_mort.probability if isinstance(p_mort, BinaryParam) else 0.0)
            conditional = min(param.probability / max(survive, 1e-12), 1.0)
            out[mask] = (u[mask] < conditional).astype(np.float64)
        columns[_READMIT] = out

    if derive_icu:
        total = columns[_TOTAL_LOS]
        columns[_ICU_LOS] = total * rng.uniform(0.3, 1.0, size=spec.n)

    if contradictions is not None and contradictions.total > 0:
        _inject_contradictions(columns, schema_names, contradictions, rng, spec.n)

    frame = pd.DataFrame({"stay_id": [f"synth-{i + 1:06d}" for i in range(spec.n)]})
    for name in schema_names:
        frame[name] = columns[name]
    table = CohortTable(schema=spec.schema, frame=frame, provenance=f"synth seed={spec.seed}")
    truth = Partition(labels=cluster_of, k=k)
    return table, truth


def _inject_contradictions(columns, schema_names, plan: Contradictions, rng, n: int) -> None:
    """Overwrite disjoint row sets so each correction rule fires an exact count."""
    required = {_TOTAL_LOS, _ICU_LOS, _MORT, _DISCHARGE_LOCATION, _READMIT}
    missing = sorted(required - set(schema_names))
    if missing:
        raise ValueError(f"contradiction injection requires features {missing}")
    if plan.total > n:
        raise ValueError("more contradictions requested than rows available")
    chosen = rng.permutation(n)[: plan.total]
    los_rows = chosen[: plan.los_rows]
    discharge_rows = chosen[plan.los_rows : plan.los_rows + plan.discharge_rows]
    readmit_rows = chosen[plan.los_rows + plan.discharge_rows :]

    icu = columns[_ICU_LOS]
    total = columns[_TOTAL_LOS]
    icu[los_rows] = np.maximum(icu[los_rows], 1.0)
    total[los_rows] = icu[los_rows] * rng.uniform(0.2, 0.8, size=len(los_rows))

    mort = columns[_MORT]
    location = columns[_DISCHARGE_LOCATION]
    readmit = columns[_READMIT]
    mort[discharge_rows] = 1.0
    location[discharge_rows] = "home"
    if "discharged_home" in columns:
        columns["discharged_home"][discharge_rows] = 1.0
    readmit[discharge_rows] = 0.0

    mort[readmit_rows] = 1.0
    readmit[readmit_rows] = 1.0
    location[readmit_rows] = None
    for name in _DISCHARGE_BINARIES:
        if name in columns:
            columns[name][readmit_rows] = 0.0


def paper_mimic_spec(n: int | None = None, seed: int | None = None) -> CohortSpec:
    """Bundled three-cluster spec shaped like the published cluster profiles.

    Means and proportions follow the reported cluster characteristics;
    the spreads are illustrative values chosen so that the pipeline's
    K selection recovers three clusters.
    """
    text = resources.files("icuclust.data").joinpath("paper_mimic_spec.json").read_text(
        encoding="utf-8"
    )
    payload = json.loads(text)
    if n is not None:
        payload["n"] = n
    if seed is not None:
        payload["seed"] = seed
    return CohortSpec.from_dict(payload)
