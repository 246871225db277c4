import hashlib
import json
import os

import numpy as np
import pandas as pd
import pytest

from icuclust.cli import main


def run_cli(*argv):
    return main(list(argv))


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run_cli("synth", "--n", "260", "--seed", "5", "--out-dir", str(out)) == 0
    return out


@pytest.fixture(scope="module")
def cluster_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("cluster")
    code = run_cli(
        "cluster",
        "--cohort", str(synth_dir / "cohort.csv"),
        "--schema", str(synth_dir / "schema.json"),
        "--sample-n", "220",
        "--iterations", "60",
        "--seed", "17",
        "--threads", "2",
        "--out-dir", str(out),
    )
    assert code == 0
    return out


class TestSynthAndIngest:
    def test_synth_outputs(self, synth_dir):
        cohort = pd.read_csv(synth_dir / "cohort.csv")
        truth = pd.read_csv(synth_dir / "truth.csv")
        assert len(cohort) == 260 and len(truth) == 260
        assert (synth_dir / "schema.json").exists()

    def test_ingest_clean_cohort(self, synth_dir, tmp_path):
        out = tmp_path / "ingest"
        code = run_cli(
            "ingest",
            "--cohort", str(synth_dir / "cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--out-dir", str(out),
        )
        assert code == 0
        report = json.loads((out / "preprocess_report.json").read_text())
        assert all(r["rows_affected"] == 0 for r in report["rule_counts"])
        assert (out / "cohort_checked.csv").exists()

    def test_ingest_reports_planted_contradictions(self, tmp_path):
        raw = tmp_path / "raw"
        assert run_cli(
            "synth", "--n", "200", "--seed", "6",
            "--contradictions", "4,3,2", "--out-dir", str(raw),
        ) == 0
        out = tmp_path / "ingest"
        assert run_cli(
            "ingest",
            "--cohort", str(raw / "cohort.csv"),
            "--schema", str(raw / "schema.json"),
            "--out-dir", str(out),
        ) == 0
        report = json.loads((out / "preprocess_report.json").read_text())
        counts = {r["rule"]: r["rows_affected"] for r in report["rule_counts"]}
        assert counts == {
            "total_los_below_icu_los": 4,
            "death_with_discharge_location": 3,
            "death_with_readmission": 2,
        }
        # the death-with-readmission rule leaves missing flags that the
        # imputation step then fills with the no-readmission default
        imputed = {r["feature"]: r["count"] for r in report["imputation_counts"]}
        assert imputed["readmission_30d"] == 2

    def test_synth_custom_spec(self, tmp_path):
        from icuclust.synth import paper_mimic_spec, save_cohort_spec

        spec_path = tmp_path / "spec.json"
        save_cohort_spec(paper_mimic_spec(n=40, seed=1), spec_path)
        out = tmp_path / "from_spec"
        assert run_cli("synth", "--spec", str(spec_path), "--out-dir", str(out)) == 0
        assert len(pd.read_csv(out / "cohort.csv")) == 40


class TestCluster:
    def test_outputs_exist(self, cluster_dir):
        for name in (
            "consensus_result.npz",
            "consensus_meta.json",
            "sample_cohort.csv",
            "remainder_cohort.csv",
            "partitions.csv",
        ):
            assert (cluster_dir / name).exists(), name
        meta = json.loads((cluster_dir / "consensus_meta.json").read_text())
        assert meta["sample_n"] == 220
        assert meta["config"]["iterations"] == 60
        parts = pd.read_csv(cluster_dir / "partitions.csv")
        assert len(parts) == 220
        assert list(parts.columns) == ["stay_id"] + [f"K{k}" for k in range(2, 10)]

    def test_rerun_is_byte_identical(self, synth_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run_cli(
                "cluster",
                "--cohort", str(synth_dir / "cohort.csv"),
                "--schema", str(synth_dir / "schema.json"),
                "--sample-n", "120",
                "--iterations", "25",
                "--seed", "3",
                "--threads", "2",
                "--out-dir", str(out),
            )
            assert code == 0
            outs.append(out)
        for name in ("consensus_result.npz", "partitions.csv", "consensus_meta.json",
                     "sample_cohort.csv"):
            assert file_hash(outs[0] / name) == file_hash(outs[1] / name), name

    def test_index_csv_flag(self, synth_dir, tmp_path):
        out = tmp_path / "withcsv"
        code = run_cli(
            "cluster",
            "--cohort", str(synth_dir / "cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--sample-n", "60",
            "--iterations", "10",
            "--k-max", "4",
            "--seed", "2",
            "--write-index-csv",
            "--out-dir", str(out),
        )
        assert code == 0
        matrix = np.loadtxt(out / "index_k2.csv", delimiter=",")
        assert matrix.shape == (60, 60)


class TestDiagnose:
    def test_outputs(self, cluster_dir, tmp_path):
        out = tmp_path / "diag"
        code = run_cli(
            "diagnose", "--result", str(cluster_dir / "consensus_result.npz"),
            "--out-dir", str(out),
        )
        assert code == 0
        report = json.loads((out / "stability_report.json").read_text())
        assert report["recommended_k"] == 3
        assert set(report["per_k"]) == {str(k) for k in range(2, 10)}
        for k in range(2, 10):
            assert (out / f"cdf_k{k}.csv").exists()
            assert (out / f"ordering_k{k}.csv").exists()
            assert (out / f"ordered_matrix_k{k}.csv").exists()  # small N: auto-written
        tracking = pd.read_csv(out / "tracking.csv")
        assert len(tracking) == 220

    def test_matrix_csvs_skipped_above_limit(self, cluster_dir, tmp_path):
        out = tmp_path / "diag2"
        code = run_cli(
            "diagnose", "--result", str(cluster_dir / "consensus_result.npz"),
            "--matrix-csv-limit", "10", "--out-dir", str(out),
        )
        assert code == 0
        assert not (out / "ordered_matrix_k2.csv").exists()
        assert (out / "cdf_k2.csv").exists()


class TestCharacterizeAndCompare:
    def test_characterize(self, synth_dir, cluster_dir, tmp_path):
        out = tmp_path / "char"
        code = run_cli(
            "characterize",
            "--cohort", str(cluster_dir / "sample_cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--result", str(cluster_dir / "consensus_result.npz"),
            "--k", "3",
            "--remainder", str(cluster_dir / "remainder_cohort.csv"),
            "--out-dir", str(out),
        )
        assert code == 0
        profiles = pd.read_csv(out / "profiles_k3.csv")
        assert "size_fraction" in set(profiles["feature"])
        tests = json.loads((out / "tests_k3.json").read_text())
        assert tests["alpha"] == 0.01
        assert (out / "sample_vs_remainder.json").exists()

    def test_bad_k_fails(self, synth_dir, cluster_dir, tmp_path):
        code = run_cli(
            "characterize",
            "--cohort", str(cluster_dir / "sample_cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--result", str(cluster_dir / "consensus_result.npz"),
            "--k", "55",
            "--out-dir", str(tmp_path / "x"),
        )
        assert code != 0

    def test_compare_profiles_and_partitions(self, synth_dir, cluster_dir, tmp_path):
        char_dir = tmp_path / "char"
        assert run_cli(
            "characterize",
            "--cohort", str(cluster_dir / "sample_cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--result", str(cluster_dir / "consensus_result.npz"),
            "--k", "3",
            "--out-dir", str(char_dir),
        ) == 0
        parts = pd.read_csv(cluster_dir / "partitions.csv")
        k3_path = tmp_path / "k3.csv"
        parts[["stay_id", "K3"]].rename(columns={"K3": "cluster"}).to_csv(k3_path, index=False)
        out = tmp_path / "compare.json"
        code = run_cli(
            "compare",
            "--profiles", str(char_dir / "profiles_k3.csv"),
            "--cohort", str(cluster_dir / "sample_cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--partition-a", str(synth_dir / "truth.csv"),
            "--partition-b", str(k3_path),
            "--out", str(out),
        )
        assert code == 0
        report = json.loads(out.read_text())
        # truth covers 260 stays, the clustered sample only 220
        assert report["partition_metrics"]["ari"] is None
        assert "incomparable" in report["partition_metrics"]["reason"]
        assert len(report["profile_comparison"]["many_to_one"]["assignment"]) == 6

    def test_compare_same_partition_gives_ari_one(self, synth_dir, tmp_path):
        out = tmp_path / "same.json"
        code = run_cli(
            "compare",
            "--partition-a", str(synth_dir / "truth.csv"),
            "--partition-b", str(synth_dir / "truth.csv"),
            "--out", str(out),
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["partition_metrics"]["ari"] == 1.0
        assert report["partition_metrics"]["nmi"] == 1.0

    def test_compare_requires_something(self, tmp_path):
        assert run_cli("compare", "--out", str(tmp_path / "r.json")) != 0


class TestScore:
    def test_score_round(self, tmp_path):
        events = pd.DataFrame(
            [
                ("s1", "age", 0.0, 70.0),
                ("s1", "gender", 0.0, 1.0),
                ("s1", "ed_admission", 0.0, 1.0),
                ("s1", "bun_creatinine_ratio", 0.0, 25.0),
                ("s1", "sodium", 1.0, 118.0),
                ("s1", "aniongap_bicarbonate_ratio", 0.0, 1.2),
                ("s1", "lactate", 2.0, 6.0),
                ("s1", "race_code", 0.0, 0.0),
            ],
            columns=["stay_id", "variable", "timestamp", "value"],
        )
        events_path = tmp_path / "events.csv"
        events.to_csv(events_path, index=False)
        out = tmp_path / "scores.csv"
        code = run_cli(
            "score", "--events", str(events_path),
            "--default-mortality-model", "--out", str(out),
        )
        assert code == 0
        scores = pd.read_csv(out)
        assert list(scores["stay_id"]) == ["s1"]
        assert scores["laps2_total"].iloc[0] > 0
        assert 0.0 <= scores["predicted_mortality"].iloc[0] <= 1.0

    def test_score_missing_input_fails(self, tmp_path):
        events = pd.DataFrame(
            [("s1", "age", 0.0, 70.0)],
            columns=["stay_id", "variable", "timestamp", "value"],
        )
        path = tmp_path / "events.csv"
        events.to_csv(path, index=False)
        assert run_cli("score", "--events", str(path), "--out", str(tmp_path / "o.csv")) != 0


class TestInterface:
    @pytest.mark.parametrize(
        "command",
        ["synth", "ingest", "score", "cluster", "diagnose", "characterize", "compare"],
    )
    def test_help_exists(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli(command, "--help")
        assert exc.value.code == 0
        assert command in capsys.readouterr().out

    def test_unknown_flag_fails_fast(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("cluster", "--frobnicate", "--out-dir", "x")
        assert exc.value.code != 0

    def test_config_file_supplies_defaults(self, synth_dir, tmp_path):
        config = {
            "seed": 4,
            "sample_n": 80,
            "consensus": {"iterations": 12, "k_max": 4},
            "paths": {"schema": str(synth_dir / "schema.json")},
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        out = tmp_path / "out"
        code = run_cli(
            "--config", str(config_path),
            "cluster",
            "--cohort", str(synth_dir / "cohort.csv"),
            "--out-dir", str(out),
        )
        assert code == 0
        meta = json.loads((out / "consensus_meta.json").read_text())
        assert meta["sample_n"] == 80
        assert meta["config"]["iterations"] == 12
        assert meta["config"]["seed"] == 4

    def test_env_var_config(self, synth_dir, tmp_path, monkeypatch):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"paths": {"schema": str(synth_dir / "schema.json")}}))
        monkeypatch.setenv("ICUCLUST_CONFIG", str(config_path))
        out = tmp_path / "ingest"
        code = run_cli("ingest", "--cohort", str(synth_dir / "cohort.csv"), "--out-dir", str(out))
        assert code == 0

    def test_flag_overrides_config(self, synth_dir, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"sample_n": 80, "consensus": {"iterations": 12}}))
        out = tmp_path / "out"
        code = run_cli(
            "--config", str(config_path),
            "cluster",
            "--cohort", str(synth_dir / "cohort.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--sample-n", "60",
            "--iterations", "8",
            "--k-max", "4",
            "--out-dir", str(out),
        )
        assert code == 0
        meta = json.loads((out / "consensus_meta.json").read_text())
        assert meta["sample_n"] == 60
        assert meta["config"]["iterations"] == 8

    def test_missing_cohort_structured_error(self, synth_dir, tmp_path, capsys):
        code = run_cli(
            "ingest",
            "--cohort", str(tmp_path / "missing.csv"),
            "--schema", str(synth_dir / "schema.json"),
            "--out-dir", str(tmp_path / "o"),
        )
        assert code == 1
        err = capsys.readouterr().err
        payload = json.loads(err.strip().splitlines()[-1])
        assert "error" in payload and "message" in payload
