import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats as sp_stats

from icuclust.characterize import (
    anova_f,
    chi_square,
    cluster_profiles,
    feature_tests,
    profile_highlights,
    profiles_to_frame,
    sample_vs_remainder,
    significant_features,
    tests_to_json as render_tests_json,
    welch_t,
)
from icuclust.cohort import CohortTable, Feature, FeatureSchema
from icuclust.hclust import Partition


def make_table(schema, rows):
    return CohortTable(schema=schema, frame=pd.DataFrame(rows))


def two_feature_schema():
    return FeatureSchema(
        features=(
            Feature("age", "continuous", "years", True),
            Feature("flag", "binary", "", True),
        )
    )


class TestProfiles:
    def test_single_cluster_equals_cohort_means(self):
        table = make_table(
            two_feature_schema(),
            {"stay_id": list("abcd"), "age": [50.0, 60.0, 70.0, 80.0], "flag": [0, 0, 1, 1]},
        )
        profiles = cluster_profiles(table, Partition(labels=np.zeros(4, dtype=int), k=1))
        assert profiles[0].value("age") == 65.0
        assert profiles[0].value("flag") == 0.5
        assert profiles[0].size_fraction == 1.0

    def test_two_clusters(self):
        table = make_table(
            two_feature_schema(),
            {"stay_id": ["a", "b"], "age": [50.0, 70.0], "flag": [0.0, 1.0]},
        )
        profiles = cluster_profiles(table, Partition(labels=np.array([0, 1]), k=2))
        assert profiles[0].value("age") == 50.0
        assert profiles[1].value("age") == 70.0

    def test_fraction_round_trip_paper_shape(self):
        sizes = [2409, 1684, 907]
        n = sum(sizes)
        rng = np.random.default_rng(0)
        table = make_table(
            two_feature_schema(),
            {
                "stay_id": [str(i) for i in range(n)],
                "age": rng.normal(65, 10, n),
                "flag": (rng.random(n) < 0.3).astype(float),
            },
        )
        labels = np.repeat(np.arange(3), sizes)
        profiles = cluster_profiles(table, Partition(labels=labels, k=3))
        fractions = [p.size_fraction for p in profiles]
        assert fractions == pytest.approx([0.4818, 0.3368, 0.1814], abs=1e-12)
        assert sum(fractions) == pytest.approx(1.0, abs=1e-9)
        frame = profiles_to_frame(profiles)
        assert list(frame["feature"]) == ["age", "flag"]
        assert frame.shape[1] == 1 + 3 + 2  # feature, clusters, min/max markers

    def test_means_within_cluster_ranges(self):
        rng = np.random.default_rng(1)
        table = make_table(
            two_feature_schema(),
            {
                "stay_id": [str(i) for i in range(60)],
                "age": rng.normal(60, 12, 60),
                "flag": (rng.random(60) < 0.5).astype(float),
            },
        )
        labels = rng.integers(0, 3, 60)
        labels[:3] = [0, 1, 2]
        profiles = cluster_profiles(table, Partition(labels=labels, k=3))
        for p in profiles:
            members = table.column("age")[labels == p.cluster_id]
            assert members.min() <= p.value("age") <= members.max()

    def test_missing_cells_rejected(self):
        table = make_table(
            two_feature_schema(),
            {"stay_id": ["a", "b"], "age": [50.0, np.nan], "flag": [0.0, 1.0]},
        )
        with pytest.raises(ValueError, match="missing"):
            cluster_profiles(table, Partition(labels=np.array([0, 1]), k=2))


class TestAnova:
    def test_identical_groups(self):
        test = anova_f([1, 2, 3, 1, 2, 3], [0, 0, 0, 1, 1, 1])
        assert test.statistic == 0.0
        assert test.p_value == 1.0

    def test_hand_example(self):
        # groups {1,2,3,4} vs {5,6,6,7}: SSB = 24.5, SSW = 7 over df (1, 6)
        test = anova_f([1, 2, 3, 4, 5, 6, 6, 7], [0, 0, 0, 0, 1, 1, 1, 1])
        assert test.statistic == pytest.approx(21.0, abs=1e-12)
        assert test.df == (1, 6)
        assert test.p_value == pytest.approx(sp_stats.f.sf(21.0, 1, 6), abs=1e-10)

    def test_three_group_oracle(self, rng):
        for _ in range(20):
            groups = [rng.normal(rng.uniform(-1, 1), 1.0, size=rng.integers(3, 12)) for _ in range(3)]
            values = np.concatenate(groups)
            labels = np.concatenate([np.full(len(g), i) for i, g in enumerate(groups)])
            ours = anova_f(values, labels)
            ref_f, ref_p = sp_stats.f_oneway(*groups)
            assert ours.statistic == pytest.approx(ref_f, abs=1e-9)
            assert ours.p_value == pytest.approx(ref_p, abs=1e-8)

    def test_shift_invariance(self, rng):
        values = rng.normal(size=30)
        labels = rng.integers(0, 3, 30)
        labels[:3] = [0, 1, 2]
        base = anova_f(values, labels)
        shifted = anova_f(values + 1234.5, labels)
        assert shifted.statistic == pytest.approx(base.statistic, abs=1e-9)

    def test_zero_within_variance_flagged(self):
        test = anova_f([1.0, 1.0, 2.0, 2.0], [0, 0, 1, 1])
        assert math.isinf(test.statistic)
        assert test.p_value == 0.0
        assert test.degenerate

    def test_preconditions(self):
        with pytest.raises(ValueError):
            anova_f([1.0, 2.0], [0, 0])


class TestChiSquare:
    def test_identical_proportions(self):
        values = [0, 1, 0, 1, 0, 1, 0, 1]
        labels = [0, 0, 0, 0, 1, 1, 1, 1]
        test = chi_square(values, labels)
        assert test.statistic == 0.0
        assert test.p_value == 1.0

    def test_hand_2x2(self):
        values = [1] * 10 + [0] * 10
        labels = [0] * 10 + [1] * 10
        test = chi_square(values, labels)
        assert test.statistic == pytest.approx(20.0, abs=1e-12)
        assert test.df == (1,)

    def test_oracle_on_random_tables(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 5))
            labels = rng.integers(0, k, size=60)
            labels[:k] = np.arange(k)
            values = (rng.random(60) < rng.uniform(0.2, 0.8)).astype(float)
            if len(np.unique(values)) < 2:
                continue
            ours = chi_square(values, labels)
            table = np.zeros((k, 2))
            for g in range(k):
                table[g, 0] = ((labels == g) & (values == 0)).sum()
                table[g, 1] = ((labels == g) & (values == 1)).sum()
            ref_stat, ref_p, ref_df, _ = sp_stats.chi2_contingency(table, correction=False)
            assert ours.statistic == pytest.approx(ref_stat, abs=1e-9)
            assert ours.p_value == pytest.approx(ref_p, abs=1e-8)
            assert ours.df == (ref_df,)

    def test_encoding_swap_invariance(self, rng):
        values = (rng.random(40) < 0.4).astype(float)
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        if len(np.unique(values)) == 2:
            a = chi_square(values, labels)
            b = chi_square(1.0 - values, labels)
            assert a.statistic == pytest.approx(b.statistic, abs=1e-9)

    def test_zero_margin_flagged(self):
        test = chi_square([0, 0, 0, 0], [0, 0, 1, 1])
        assert test.degenerate
        assert math.isnan(test.p_value)


class TestWelch:
    def test_identical_samples(self):
        x = [1.0, 2.0, 3.0, 4.0]
        test = welch_t(x, list(x))
        assert test.statistic == 0.0
        assert test.p_value == 1.0

    def test_oracle(self, rng):
        for _ in range(100):
            x = rng.normal(0, 1, size=rng.integers(5, 30))
            y = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=rng.integers(5, 30))
            ours = welch_t(x, y)
            ref = sp_stats.ttest_ind(x, y, equal_var=False)
            assert ours.statistic == pytest.approx(ref.statistic, abs=1e-9)
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-8)

    def test_degenerate_variance(self):
        equal = welch_t([2.0, 2.0], [2.0, 2.0])
        assert equal.p_value == 1.0 and equal.degenerate
        differ = welch_t([2.0, 2.0], [3.0, 3.0])
        assert differ.p_value == 0.0 and differ.degenerate


class TestSampleVsRemainder:
    def _tables(self, shift_dnr=0.0, seed=0, n=800):
        rng = np.random.default_rng(seed)
        schema = FeatureSchema(
            features=(
                Feature("age", "continuous", "years", True),
                Feature("dnr", "binary", "", True),
                Feature("los", "continuous", "days", True),
            )
        )
        def build(offset_dnr, start):
            return make_table(
                schema,
                {
                    "stay_id": [str(start + i) for i in range(n)],
                    "age": rng.normal(65, 10, n),
                    "dnr": (rng.random(n) < 0.2 + offset_dnr).astype(float),
                    "los": rng.normal(10, 3, n),
                },
            )
        return build(shift_dnr, 0), build(0.0, n)

    def test_copy_gives_p_one(self):
        sample, _ = self._tables()
        tests = sample_vs_remainder(sample, sample.copy())
        assert all(t.p_value == 1.0 for t in tests)

    def test_planted_shift_flags_only_that_feature(self):
        sample, remainder = self._tables(shift_dnr=0.25, seed=3)
        tests = sample_vs_remainder(sample, remainder)
        assert significant_features(tests, alpha=0.05) == ["dnr"]

    def test_schema_mismatch_rejected(self):
        sample, _ = self._tables()
        other = make_table(
            FeatureSchema(features=(Feature("x", "continuous"),)),
            {"stay_id": ["a", "b"], "x": [1.0, 2.0]},
        )
        with pytest.raises(ValueError):
            sample_vs_remainder(sample, other)


class TestFeatureTestsAndHighlights:
    def test_feature_tests_use_right_statistic(self, rng):
        schema = two_feature_schema()
        table = make_table(
            schema,
            {
                "stay_id": [str(i) for i in range(30)],
                "age": rng.normal(60, 10, 30),
                "flag": (rng.random(30) < 0.5).astype(float),
            },
        )
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        tests = feature_tests(table, Partition(labels=labels, k=2))
        kinds = {t.feature: t.kind for t in tests}
        assert kinds == {"age": "anova_f", "flag": "chi_square"}
        payload = render_tests_json(tests)
        assert "significant_features" in payload

    def test_highlights_unique_with_tie_to_lower_id(self):
        from icuclust.characterize import ClusterProfile

        profiles = [
            ClusterProfile(0, 0.4, {"age": 60.0, "los": 5.0}),
            ClusterProfile(1, 0.3, {"age": 70.0, "los": 5.0}),
            ClusterProfile(2, 0.3, {"age": 50.0, "los": 9.0}),
        ]
        marks = profile_highlights(profiles)
        assert marks["age"] == {"min_cluster": 2, "max_cluster": 1}
        # los ties between clusters 0 and 1 at the minimum: lower id wins
        assert marks["los"]["min_cluster"] == 0
        assert marks["los"]["max_cluster"] == 2
