"""Command-line pipeline driver.

Subcommands: synth | ingest | score | cluster | diagnose | characterize |
compare. Options come from (in increasing precedence) built-in defaults,
a JSON config file (--config or the ICUCLUST_CONFIG environment
variable), and command-line flags. All randomness flows from a single
seed, and result files are byte-identical across reruns with the same
inputs; logs go to stderr, results to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

from . import cohort as cohort_mod
from . import synth as synth_mod
from .characterize import (
    cluster_profiles,
    feature_tests,
    profiles_to_frame,
    sample_vs_remainder,
    tests_to_json,
)
from .compare import (
    ClusterProfile,
    ari,
    compare_profiles_to_reference,
    load_reference_profiles,
    nmi,
)
from .consensus import ConsensusConfig, ConsensusResult, run_consensus, write_index_csv
from .diagnostics import consensus_cdf, instability_flags, order_matrix, tracking_table
from .severity import (
    default_mortality_model,
    default_preliminary_model,
    default_score_definition,
    load_score_definition,
    MortalityModel,
    PreliminaryModel,
    score_events_frame,
)

ENV_CONFIG = "ICUCLUST_CONFIG"

logger = logging.getLogger("icuclust")


class _Stage:
    """Stderr log lines carrying the stage name and elapsed seconds."""

    def __init__(self, name: str):
        self.name = name
        self.t0 = time.monotonic()

    def info(self, message: str, *args) -> None:
        logger.info(
            "stage=%s elapsed=%.2fs " + message, self.name, time.monotonic() - self.t0, *args
        )


def _load_config(path: str | None) -> dict:
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cfg(args, config: dict, flag: str, section: str | None, key: str, default):
    value = getattr(args, flag, None)
    if value is not None:
        return value
    scope = config.get(section, {}) if section else config
    if key in scope:
        return scope[key]
    return default


def _require(value, name: str):
    if value is None:
        raise ValueError(f"{name} is required (flag or config file)")
    return value


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return 1


def cmd_synth(args, config: dict) -> int:
    stage = _Stage("synth")
    if args.spec:
        spec = synth_mod.load_cohort_spec(args.spec)
        if args.n is not None or args.seed is not None:
            payload = spec.to_dict()
            if args.n is not None:
                payload["n"] = args.n
            if args.seed is not None:
                payload["seed"] = args.seed
            spec = synth_mod.CohortSpec.from_dict(payload)
    else:
        spec = synth_mod.paper_mimic_spec(n=args.n, seed=args.seed)
    contradictions = None
    if args.contradictions:
        parts = [int(x) for x in args.contradictions.split(",")]
        if len(parts) != 3:
            raise ValueError("--contradictions expects LOS,DISCHARGE,READMIT counts")
        contradictions = synth_mod.Contradictions(*parts)
    table, truth = synth_mod.generate(spec, contradictions=contradictions)
    os.makedirs(args.out_dir, exist_ok=True)
    cohort_mod.write_cohort(table, os.path.join(args.out_dir, "cohort.csv"))
    cohort_mod.save_schema(spec.schema, os.path.join(args.out_dir, "schema.json"))
    pd.DataFrame(
        {"stay_id": table.frame["stay_id"], "cluster": truth.labels}
    ).to_csv(os.path.join(args.out_dir, "truth.csv"), index=False)
    stage.info("wrote %d rows to %s", table.n_rows, args.out_dir)
    return 0


def cmd_ingest(args, config: dict) -> int:
    stage = _Stage("ingest")
    schema = cohort_mod.load_schema(
        _require(_cfg(args, config, "schema", "paths", "schema", None), "schema")
    )
    cohort_path = _require(_cfg(args, config, "cohort", "paths", "cohort", None), "cohort")
    table = cohort_mod.load_cohort(cohort_path, schema)
    if table.parse_warnings:
        stage.info("parse warnings: %s", table.parse_warnings)
    checked, report = cohort_mod.apply_consistency_checks(table)
    imputed, counts = cohort_mod.impute_defaults(checked)
    report.imputation_counts = counts
    os.makedirs(args.out_dir, exist_ok=True)
    cohort_mod.write_cohort(imputed, os.path.join(args.out_dir, "cohort_checked.csv"))
    with open(os.path.join(args.out_dir, "preprocess_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    stage.info(
        "checked %d rows; corrections %s", imputed.n_rows, dict(report.rule_counts)
    )
    return 0


def cmd_score(args, config: dict) -> int:
    stage = _Stage("score")
    definition = (
        load_score_definition(args.definition) if args.definition else default_score_definition()
    )
    if args.preliminary_model:
        with open(args.preliminary_model, "r", encoding="utf-8") as fh:
            preliminary = PreliminaryModel.from_dict(json.load(fh))
    else:
        preliminary = default_preliminary_model()
    mortality = None
    if args.mortality_model:
        with open(args.mortality_model, "r", encoding="utf-8") as fh:
            mortality = MortalityModel.from_dict(json.load(fh))
    elif args.default_mortality_model:
        mortality = default_mortality_model()
    events = pd.read_csv(args.events)
    scores = score_events_frame(events, definition, preliminary, mortality)
    scores.to_csv(args.out, index=False)
    stage.info("scored %d stays -> %s", len(scores), args.out)
    return 0


def _consensus_config(args, config: dict) -> ConsensusConfig:
    section = "consensus"
    return ConsensusConfig(
        iterations=int(_cfg(args, config, "iterations", section, "iterations", 1000)),
        item_fraction=float(_cfg(args, config, "item_fraction", section, "item_fraction", 0.8)),
        feature_fraction=float(
            _cfg(args, config, "feature_fraction", section, "feature_fraction", 0.8)
        ),
        k_min=int(_cfg(args, config, "k_min", section, "k_min", 2)),
        k_max=int(_cfg(args, config, "k_max", section, "k_max", 9)),
        inner_linkage=_cfg(args, config, "inner_linkage", section, "inner_linkage", "average"),
        consensus_linkage=_cfg(
            args, config, "consensus_linkage", section, "consensus_linkage", "average"
        ),
        seed=int(_cfg(args, config, "seed", None, "seed", 0)),
    )


def cmd_cluster(args, config: dict) -> int:
    stage = _Stage("cluster")
    schema = cohort_mod.load_schema(
        _require(_cfg(args, config, "schema", "paths", "schema", None), "schema")
    )
    cohort_path = _require(_cfg(args, config, "cohort", "paths", "cohort", None), "cohort")
    table = cohort_mod.load_cohort(cohort_path, schema)
    cc = _consensus_config(args, config)
    sample_n = _cfg(args, config, "sample_n", None, "sample_n", None)
    if sample_n is not None and int(sample_n) < table.n_rows:
        sampled, remainder = cohort_mod.sample(table, int(sample_n), cc.seed)
    else:
        sampled, remainder = table, None
    stage.info("clustering %d of %d stays", sampled.n_rows, table.n_rows)
    standardized = cohort_mod.standardize(sampled)
    if standardized.constant_flags.any():
        names = [
            n for n, flag in zip(standardized.feature_names, standardized.constant_flags) if flag
        ]
        stage.info("constant clustering features: %s", names)
    workers = int(_cfg(args, config, "threads", None, "threads", 1))
    result = run_consensus(standardized, cc, workers=workers)
    stage.info("consensus finished; rng digest %s", result.rng_digest)

    os.makedirs(args.out_dir, exist_ok=True)
    result.save(os.path.join(args.out_dir, "consensus_result.npz"))
    cohort_mod.write_cohort(sampled, os.path.join(args.out_dir, "sample_cohort.csv"))
    if remainder is not None:
        cohort_mod.write_cohort(remainder, os.path.join(args.out_dir, "remainder_cohort.csv"))
    partitions = pd.DataFrame({"stay_id": sampled.frame["stay_id"]})
    for k, entry in sorted(result.per_k.items()):
        partitions[f"K{k}"] = entry.partition.labels
    partitions.to_csv(os.path.join(args.out_dir, "partitions.csv"), index=False)
    meta = {
        "n": result.n,
        "config": result.config.to_dict(),
        "flags": result.flags.to_dict(),
        "rng_digest": result.rng_digest,
        "workers": workers,
        "sample_n": sampled.n_rows,
        "source_rows": table.n_rows,
    }
    _write_json(meta, os.path.join(args.out_dir, "consensus_meta.json"))
    if args.write_index_csv:
        for k, entry in sorted(result.per_k.items()):
            write_index_csv(entry.matrix, os.path.join(args.out_dir, f"index_k{k}.csv"))
    stage.info("results written to %s", args.out_dir)
    return 0


def cmd_diagnose(args, config: dict) -> int:
    stage = _Stage("diagnose")
    result = ConsensusResult.load(args.result)
    section = "diagnostics"
    report = instability_flags(
        result,
        pac_lower=float(_cfg(args, config, "pac_lower", section, "pac_lower", 0.1)),
        pac_upper=float(_cfg(args, config, "pac_upper", section, "pac_upper", 0.9)),
        small_cluster_factor=float(
            _cfg(args, config, "small_cluster_factor", section, "small_cluster_factor", 0.5)
        ),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "stability_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")

    partitions = {k: entry.partition for k, entry in result.per_k.items()}
    tracking_table(partitions).to_csv(os.path.join(args.out_dir, "tracking.csv"), index=False)

    write_matrices = args.write_matrices or result.n <= args.matrix_csv_limit
    for k, entry in sorted(result.per_k.items()):
        cdf = consensus_cdf(entry.matrix)
        pd.DataFrame(
            {"index": cdf.support, "cumulative_fraction": cdf.cumulative_fraction}
        ).to_csv(os.path.join(args.out_dir, f"cdf_k{k}.csv"), index=False)
        ordered = order_matrix(entry.matrix, entry.partition, entry.tree)
        pd.DataFrame(
            {
                "position": np.arange(result.n),
                "item": ordered.permutation,
                "boundary": np.isin(np.arange(result.n) + 1, ordered.block_boundaries).astype(int),
            }
        ).to_csv(os.path.join(args.out_dir, f"ordering_k{k}.csv"), index=False)
        if write_matrices:
            np.savetxt(
                os.path.join(args.out_dir, f"ordered_matrix_k{k}.csv"),
                ordered.matrix,
                fmt="%.6g",
                delimiter=",",
            )
    stage.info(
        "recommended_k=%d rationale=%s -> %s",
        report.recommended_k,
        ",".join(report.rationale),
        args.out_dir,
    )
    return 0


def _load_partition_csv(path) -> tuple[pd.Series, np.ndarray]:
    frame = pd.read_csv(path)
    if "cluster" in frame.columns:
        return frame["stay_id"], frame["cluster"].to_numpy()
    k_cols = [c for c in frame.columns if c.startswith("K")]
    if len(k_cols) == 1:
        return frame["stay_id"], frame[k_cols[0]].to_numpy()
    raise ValueError(f"{path}: expected a 'cluster' column or a single K column")


def cmd_characterize(args, config: dict) -> int:
    stage = _Stage("characterize")
    schema = cohort_mod.load_schema(
        _require(_cfg(args, config, "schema", "paths", "schema", None), "schema")
    )
    table = cohort_mod.load_cohort(args.cohort, schema)
    result = ConsensusResult.load(args.result)
    k = int(args.k)
    if k not in result.per_k:
        return _fail("bad_k", f"K={k} not present in the consensus result")
    partition = result.per_k[k].partition
    if partition.n != table.n_rows:
        return _fail("size_mismatch", "cohort rows do not match the consensus result")
    profiles = cluster_profiles(table, partition)
    tests = feature_tests(table, partition)
    os.makedirs(args.out_dir, exist_ok=True)
    frame = profiles_to_frame(profiles)
    fractions = ["size_fraction"] + [p.size_fraction for p in profiles] + [np.nan, np.nan]
    frame.loc[len(frame)] = fractions
    frame.to_csv(os.path.join(args.out_dir, f"profiles_k{k}.csv"), index=False)
    with open(os.path.join(args.out_dir, f"tests_k{k}.json"), "w", encoding="utf-8") as fh:
        fh.write(tests_to_json(tests, alpha=float(args.alpha)))
        fh.write("\n")
    if args.remainder:
        remainder = cohort_mod.load_cohort(args.remainder, schema)
        comparison = sample_vs_remainder(table, remainder)
        with open(
            os.path.join(args.out_dir, "sample_vs_remainder.json"), "w", encoding="utf-8"
        ) as fh:
            fh.write(tests_to_json(comparison, alpha=0.05))
            fh.write("\n")
    stage.info("profiles and tests for K=%d -> %s", k, args.out_dir)
    return 0


def _profiles_from_csv(path) -> list[ClusterProfile]:
    frame = pd.read_csv(path)
    cluster_cols = [c for c in frame.columns if c.startswith("cluster_")]
    fraction_row = frame[frame["feature"] == "size_fraction"]
    if fraction_row.empty:
        raise ValueError("profiles CSV lacks the size_fraction row")
    body = frame[frame["feature"] != "size_fraction"]
    profiles = []
    for i, col in enumerate(cluster_cols):
        values = dict(zip(body["feature"], body[col].astype(float)))
        profiles.append(
            ClusterProfile(
                cluster_id=i,
                size_fraction=float(fraction_row[col].iloc[0]),
                values=values,
            )
        )
    return profiles


def cmd_compare(args, config: dict) -> int:
    stage = _Stage("compare")
    section = "comparison"
    report: dict = {}
    if args.partition_a and args.partition_b:
        ids_a, labels_a = _load_partition_csv(args.partition_a)
        ids_b, labels_b = _load_partition_csv(args.partition_b)
        if len(labels_a) != len(labels_b):
            report["partition_metrics"] = {
                "ari": None,
                "nmi": None,
                "reason": f"incomparable: partitions cover {len(labels_a)} vs {len(labels_b)} items",
            }
        else:
            report["partition_metrics"] = {
                "ari": ari(labels_a, labels_b),
                "nmi": nmi(labels_a, labels_b),
            }
    if args.profiles:
        profiles = _profiles_from_csv(args.profiles)
        schema = cohort_mod.load_schema(
            _require(_cfg(args, config, "schema", "paths", "schema", None), "schema")
        )
        scale_table = cohort_mod.load_cohort(
            _require(args.cohort, "cohort (for per-feature scales)"), schema
        )
        scale = {}
        for f in schema.features:
            if f.kind in ("continuous", "binary"):
                scale[f.name] = float(np.nanstd(scale_table.column(f.name), ddof=1))
        reference = load_reference_profiles(
            _cfg(args, config, "reference", section, "reference", "vranas2017")
        )
        include_code_status = not args.exclude_code_status
        if "include_code_status" in config.get(section, {}) and not args.exclude_code_status:
            include_code_status = bool(config[section]["include_code_status"])
        report["profile_comparison"] = compare_profiles_to_reference(
            profiles,
            reference,
            scale,
            include_code_status=include_code_status,
            include_redacted=args.include_redacted,
        )
    if not report:
        return _fail("nothing_to_do", "give --partition-a/--partition-b and/or --profiles")
    _write_json(report, args.out)
    stage.info("comparison written to %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icuclust",
        description="Consensus clustering pipeline for ICU cohorts.",
    )
    parser.add_argument("--config", help="JSON config file (or set ICUCLUST_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--spec", help="cohort spec JSON (default: bundled paper-shaped spec)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--contradictions", help="LOS,DISCHARGE,READMIT row counts to plant")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load, check and impute a cohort")
    p.add_argument("--cohort")
    p.add_argument("--schema")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="batch severity scoring from a lab-events CSV")
    p.add_argument("--events", required=True)
    p.add_argument("--definition")
    p.add_argument("--preliminary-model")
    p.add_argument("--mortality-model")
    p.add_argument("--default-mortality-model", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("cluster", help="standardize, sample and run consensus clustering")
    p.add_argument("--cohort")
    p.add_argument("--schema")
    p.add_argument("--sample-n", type=int, dest="sample_n")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--item-fraction", type=float, dest="item_fraction")
    p.add_argument("--feature-fraction", type=float, dest="feature_fraction")
    p.add_argument("--k-min", type=int, dest="k_min")
    p.add_argument("--k-max", type=int, dest="k_max")
    p.add_argument("--inner-linkage", dest="inner_linkage")
    p.add_argument("--consensus-linkage", dest="consensus_linkage")
    p.add_argument("--threads", type=int)
    p.add_argument("--write-index-csv", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("diagnose", help="stability report and plot-ready data files")
    p.add_argument("--result", required=True, help="consensus_result.npz from cluster")
    p.add_argument("--pac-lower", type=float, dest="pac_lower")
    p.add_argument("--pac-upper", type=float, dest="pac_upper")
    p.add_argument("--small-cluster-factor", type=float, dest="small_cluster_factor")
    p.add_argument("--write-matrices", action="store_true",
                   help="write ordered matrix CSVs regardless of size")
    p.add_argument("--matrix-csv-limit", type=int, default=2000,
                   help="auto-write ordered matrix CSVs only up to this N")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("characterize", help="cluster profiles and significance tests")
    p.add_argument("--cohort", required=True, help="sample_cohort.csv from cluster")
    p.add_argument("--schema")
    p.add_argument("--result", required=True)
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--remainder", help="remainder_cohort.csv for the sample-vs-rest check")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("compare", help="partition metrics and reference profile mapping")
    p.add_argument("--partition-a", dest="partition_a")
    p.add_argument("--partition-b", dest="partition_b")
    p.add_argument("--profiles", help="profiles CSV from characterize")
    p.add_argument("--cohort", help="cohort CSV supplying per-feature scale stddevs")
    p.add_argument("--schema")
    p.add_argument("--reference")
    p.add_argument("--exclude-code-status", action="store_true")
    p.add_argument("--include-redacted", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except (ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
