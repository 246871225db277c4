"""Cluster characterization: per-cluster profiles and significance tests.

Profiles report the mean of each continuous feature and the proportion of
each binary feature per cluster (categoricals are excluded). Non-uniform
distribution across clusters is tested with one-way ANOVA for continuous
features and a Pearson chi-square for binaries; a sampled subset is
compared against its remainder with Welch's t-test. Statistics and
p-values are computed in-package (see special.py) so that scipy remains
an independent oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .cohort import CohortTable
from .hclust import Partition
from .special import chi2_sf, f_sf, t_sf_two_sided


@dataclass(frozen=True)
class ClusterProfile:
    """Mean/proportion vector for one cluster plus its size fraction."""

    cluster_id: int
    size_fraction: float
    values: dict

    def value(self, feature: str) -> float:
        return self.values[feature]


@dataclass(frozen=True)
class FeatureTest:
    feature: str
    kind: str  # anova_f | chi_square | welch_t
    statistic: float
    p_value: float
    df: tuple
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "kind": self.kind,
            "statistic": None if math.isnan(self.statistic) else self.statistic,
            "p_value": None if math.isnan(self.p_value) else self.p_value,
            "df": list(self.df),
            "degenerate": self.degenerate,
        }


def profile_feature_names(table: CohortTable) -> list[str]:
    return [f.name for f in table.schema.features if f.kind in ("continuous", "binary")]


def cluster_profiles(table: CohortTable, partition: Partition) -> list[ClusterProfile]:
    """Per-cluster means (continuous) and proportions (binary)."""
    if partition.n != table.n_rows:
        raise ValueError("partition does not match table size")
    names = profile_feature_names(table)
    columns = {name: table.column(name) for name in names}
    for name, col in columns.items():
        if np.isnan(col).any():
            raise ValueError(f"feature {name!r} has missing cells; impute before profiling")
    profiles = []
    for c in range(partition.k):
        mask = partition.labels == c
        if not mask.any():
            raise ValueError(f"cluster {c} is empty")
        values = {name: float(columns[name][mask].mean()) for name in names}
        profiles.append(
            ClusterProfile(
                cluster_id=c,
                size_fraction=float(mask.sum()) / partition.n,
                values=values,
            )
        )
    return profiles


def anova_f(values, labels) -> FeatureTest:
    """One-way ANOVA F test across groups.

    With zero within-group variance everywhere (and any between-group
    spread) the statistic is infinite; p is reported as 0 with the
    degenerate flag set.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [values[labels == g] for g in np.unique(labels)]
    k = len(groups)
    n = values.size
    if k < 2 or any(len(g) < 1 for g in groups):
        raise ValueError("ANOVA needs at least two non-empty groups")
    if n - k < 1:
        raise ValueError("ANOVA needs at least one group with two or more values")
    grand = values.mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df = (k - 1, n - k)
    if ss_within == 0.0:
        if ss_between == 0.0:
            return FeatureTest("", "anova_f", 0.0, 1.0, df)
        return FeatureTest("", "anova_f", math.inf, 0.0, df, degenerate=True)
    f = (ss_between / df[0]) / (ss_within / df[1])
    return FeatureTest("", "anova_f", float(f), f_sf(f, df[0], df[1]), df)


def chi_square(values, labels) -> FeatureTest:
    """Pearson chi-square for a binary feature against cluster membership.

    A zero-margin outcome column (feature constant over the cohort) makes
    the test undefined: the statistic and p are NaN and the degenerate
    flag is set.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all((values == 0.0) | (values == 1.0)):
        raise ValueError("chi-square expects a 0/1 feature")
    group_ids = np.unique(labels)
    k = len(group_ids)
    if k < 2:
        raise ValueError("chi-square needs at least two groups")
    table = np.zeros((k, 2), dtype=np.float64)
    for row, g in enumerate(group_ids):
        in_g = values[labels == g]
        table[row, 0] = (in_g == 0.0).sum()
        table[row, 1] = (in_g == 1.0).sum()
    if np.any(table.sum(axis=1) == 0):
        raise ValueError("every cluster must contain at least one row")
    df = (k - 1,)
    col_sums = table.sum(axis=0)
    if np.any(col_sums == 0):
        return FeatureTest("", "chi_square", math.nan, math.nan, df, degenerate=True)
    row_sums = table.sum(axis=1, keepdims=True)
    expected = row_sums * col_sums[None, :] / table.sum()
    stat = float(((table - expected) ** 2 / expected).sum())
    return FeatureTest("", "chi_square", stat, chi2_sf(stat, df[0]), df)


def welch_t(x, y) -> FeatureTest:
    """Welch's two-sample t-test (unequal variances)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("Welch's t needs at least two values per sample")
    vx = x.var(ddof=1)
    vy = y.var(ddof=1)
    if vx == 0.0 and vy == 0.0:
        if x.mean() == y.mean():
            return FeatureTest("", "welch_t", 0.0, 1.0, (math.nan,), degenerate=True)
        return FeatureTest("", "welch_t", math.inf, 0.0, (math.nan,), degenerate=True)
    se2 = vx / len(x) + vy / len(y)
    t = (x.mean() - y.mean()) / math.sqrt(se2)
    df = se2**2 / (vx**2 / (len(x) ** 2 * (len(x) - 1)) + vy**2 / (len(y) ** 2 * (len(y) - 1)))
    return FeatureTest("", "welch_t", float(t), t_sf_two_sided(t, df), (df,))


def _with_feature(test: FeatureTest, feature: str) -> FeatureTest:
    return FeatureTest(
        feature=feature,
        kind=test.kind,
        statistic=test.statistic,
        p_value=test.p_value,
        df=test.df,
        degenerate=test.degenerate,
    )


def feature_tests(table: CohortTable, partition: Partition) -> list[FeatureTest]:
    """Non-uniformity tests per feature: ANOVA for continuous, chi-square for binary."""
    tests = []
    for f in table.schema.features:
        if f.kind == "continuous":
            tests.append(_with_feature(anova_f(table.column(f.name), partition.labels), f.name))
        elif f.kind == "binary":
            tests.append(
                _with_feature(chi_square(table.column(f.name), partition.labels), f.name)
            )
    return tests


def sample_vs_remainder(
    sample: CohortTable, remainder: CohortTable, alpha: float = 0.05
) -> list[FeatureTest]:
    """Welch's t per feature between a sample and the remaining rows.

    Binary features are compared as means of 0/1 values. Use
    ``significant_features`` to pull out the ones below ``alpha``.
    """
    if sample.schema != remainder.schema:
        raise ValueError("sample and remainder must share a schema")
    tests = []
    for f in sample.schema.features:
        if f.kind == "categorical":
            continue
        tests.append(
            _with_feature(welch_t(sample.column(f.name), remainder.column(f.name)), f.name)
        )
    return tests


def significant_features(tests, alpha: float = 0.05) -> list[str]:
    return [t.feature for t in tests if not math.isnan(t.p_value) and t.p_value < alpha]


def profile_highlights(profiles) -> dict:
    """Per feature, the clusters holding the extreme values (Table-style red/green).

    Exactly one minimum and one maximum per feature; ties break toward the
    lower cluster id.
    """
    if not profiles:
        raise ValueError("no profiles given")
    features = list(profiles[0].values)
    out = {}
    for name in features:
        vals = [p.value(name) for p in profiles]
        out[name] = {
            "min_cluster": int(np.argmin(vals)),
            "max_cluster": int(np.argmax(vals)),
        }
    return out


def profiles_to_frame(profiles):
    """Profiles as a feature-by-cluster table (Table-2 shape)."""
    import pandas as pd

    features = list(profiles[0].values)
    data = {"feature": features}
    for p in profiles:
        data[f"cluster_{p.cluster_id + 1}"] = [p.value(f) for f in features]
    frame = pd.DataFrame(data)
    highlights = profile_highlights(profiles)
    frame["min_cluster"] = [highlights[f]["min_cluster"] + 1 for f in features]
    frame["max_cluster"] = [highlights[f]["max_cluster"] + 1 for f in features]
    return frame


def tests_to_json(tests, alpha: float = 0.05) -> str:
    payload = {
        "alpha": alpha,
        "tests": [t.to_dict() for t in tests],
        "significant_features": significant_features(tests, alpha),
    }
    return json.dumps(payload, indent=2, sort_keys=True)
