"""Consensus clustering pipeline for ICU patient subgrouping.

Cohort preprocessing, severity-score construction, subsampled consensus
clustering with stability diagnostics, cluster characterization, and
cross-study cluster comparison, runnable end-to-end on synthetic or
user-supplied tabular cohorts.
"""

from .cohort import (
    CohortTable,
    Feature,
    FeatureSchema,
    PreprocessReport,
    StandardizedMatrix,
    apply_consistency_checks,
    load_cohort,
    load_schema,
    sample,
    standardize,
    write_cohort,
)
from .consensus import ConsensusConfig, ConsensusMatrix, ConsensusResult, run_consensus
from .diagnostics import StabilityReport, consensus_cdf, instability_flags, pac
from .hclust import Dendrogram, DistanceMatrix, Partition, agglomerate, cut, pairwise_distances
from .characterize import ClusterProfile, cluster_profiles, feature_tests
from .compare import MappingReport, ari, best_many_to_one, best_one_to_one, nmi
from .synth import CohortSpec, generate, paper_mimic_spec

__version__ = "0.1.0"

__all__ = [
    "CohortTable",
    "Feature",
    "FeatureSchema",
    "PreprocessReport",
    "StandardizedMatrix",
    "apply_consistency_checks",
    "load_cohort",
    "load_schema",
    "sample",
    "standardize",
    "write_cohort",
    "ConsensusConfig",
    "ConsensusMatrix",
    "ConsensusResult",
    "run_consensus",
    "StabilityReport",
    "consensus_cdf",
    "instability_flags",
    "pac",
    "Dendrogram",
    "DistanceMatrix",
    "Partition",
    "agglomerate",
    "cut",
    "pairwise_distances",
    "ClusterProfile",
    "cluster_profiles",
    "feature_tests",
    "MappingReport",
    "ari",
    "best_many_to_one",
    "best_one_to_one",
    "nmi",
    "CohortSpec",
    "generate",
    "paper_mimic_spec",
]
