"""
Tests for the ckmm command-line interface.
"""

import json

import numpy as np
import pandas as pd
import pytest

import ckmm.cli
from ckmm.cli import main
from ckmm.data_io import load_model

QUIET = ["--seed", "5", "--threads", "1", "--log-level", "WARNING"]
FAST = ["--restarts", "1", "--max-iterations", "4"]


def simulate(out, scenario="S2", count=2):
    return main(["simulate", "--scenario", scenario, "--T", "6", "--n", "30", "--count", str(count),
                 "--out", str(out)] + QUIET)


def error_line(captured):
    lines = [line for line in captured.err.splitlines() if line.startswith("ckmm: error")]
    assert len(lines) == 1
    return lines[0]


class TestSimulate:
    """Test `ckmm simulate`."""

    def test_writes_datasets_and_manifest(self, tmp_path):
        assert simulate(tmp_path / "data") == 0
        written = sorted(p.name for p in (tmp_path / "data").iterdir())
        assert written == ["dataset_000.csv", "dataset_001.csv", "manifest.json"]
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 5
        assert manifest["scenario"]["name"] == "S2"
        assert [entry["file"] for entry in manifest["datasets"]] == ["dataset_000.csv", "dataset_001.csv"]
        assert len(manifest["datasets"][0]["labels"]) == 30

    def test_reruns_are_byte_identical(self, tmp_path):
        simulate(tmp_path / "first")
        simulate(tmp_path / "second")
        for path in (tmp_path / "first").iterdir():
            assert path.read_bytes() == (tmp_path / "second" / path.name).read_bytes()

    def test_scenario_file(self, tmp_path):
        from ckmm.simulate import get_scenario, scenario_to_dict

        scenario_file = tmp_path / "custom.json"
        scenario_file.write_text(json.dumps(scenario_to_dict(get_scenario("S4"))), encoding="utf-8")
        status = main(["simulate", "--scenario-file", str(scenario_file), "--T", "5", "--n", "20",
                       "--out", str(tmp_path / "data")] + QUIET)
        assert status == 0
        frame = pd.read_csv(tmp_path / "data" / "dataset_000.csv")
        assert frame["time"].max() == 4 and frame["subject"].nunique() == 20

    def test_unknown_scenario(self, tmp_path, capsys):
        assert simulate(tmp_path / "data", scenario="S7") == 2
        line = error_line(capsys.readouterr())
        assert "code=UNKNOWN_SCENARIO" in line
        assert "S1" in line

    def test_missing_scenario(self, tmp_path, capsys):
        assert main(["simulate", "--out", str(tmp_path)] + QUIET) == 2
        assert "code=INVALID_CONFIG" in error_line(capsys.readouterr())

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "occupied"
        blocker.write_text("", encoding="utf-8")
        assert simulate(blocker) == 2
        assert "code=OUTPUT_ERROR" in error_line(capsys.readouterr())


class TestFit:
    """Test `ckmm fit`."""

    def test_single_cluster_labels(self, tmp_path):
        simulate(tmp_path / "data", count=1)
        status = main(["fit", "--data", str(tmp_path / "data" / "dataset_000.csv"), "--g", "1",
                       "--out", str(tmp_path / "fit")] + QUIET + FAST)
        assert status == 0
        labels = pd.read_csv(tmp_path / "fit" / "labels.csv")
        assert list(labels.columns) == ["subject", "label"]
        assert (labels["label"] == 0).all()
        summary = json.loads((tmp_path / "fit" / "fit.json").read_text(encoding="utf-8"))
        assert summary["G"] == 1 and summary["runtime_ms"] == 0
        responsibilities = pd.read_csv(tmp_path / "fit" / "responsibilities.csv")
        assert list(responsibilities.columns) == ["subject", "p0"]
        trace = pd.read_csv(tmp_path / "fit" / "trace.csv")
        assert len(trace) == summary["iterations"] + 1

    def test_binned_evaluation_flag(self, tmp_path):
        simulate(tmp_path / "data", count=1)
        status = main(["fit", "--data", str(tmp_path / "data" / "dataset_000.csv"), "--g", "2",
                       "--kde-evaluation", "binned", "--out", str(tmp_path / "fit")] + QUIET + FAST)
        assert status == 0
        assert load_model(tmp_path / "fit" / "model.ckmm").config.kde_evaluation == "binned"

    def test_manifest_fits_every_dataset(self, tmp_path):
        simulate(tmp_path / "data")
        status = main(["fit", "--manifest", str(tmp_path / "data" / "manifest.json"), "--g", "2",
                       "--out", str(tmp_path / "fits")] + QUIET + FAST)
        assert status == 0
        assert (tmp_path / "fits" / "dataset_000" / "model.ckmm").exists()
        assert (tmp_path / "fits" / "dataset_001" / "model.ckmm").exists()

    def test_corrupt_csv_reports_line(self, tmp_path, capsys):
        simulate(tmp_path / "data", count=1)
        path = tmp_path / "data" / "dataset_000.csv"
        lines = path.read_text(encoding="utf-8").splitlines()
        lines[3] = ",".join(lines[3].split(",")[:3] + ["oops"])
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        status = main(["fit", "--data", str(path), "--g", "2", "--out", str(tmp_path / "fit")] + QUIET + FAST)
        assert status == 2
        line = error_line(capsys.readouterr())
        assert "code=FORMAT_ERROR line=4 " in line

    def test_invalid_setting(self, tmp_path, capsys):
        simulate(tmp_path / "data", count=1)
        status = main(["fit", "--data", str(tmp_path / "data" / "dataset_000.csv"), "--restarts", "0",
                       "--out", str(tmp_path / "fit")] + QUIET)
        assert status == 2
        assert "code=INVALID_CONFIG" in error_line(capsys.readouterr())

    def test_too_many_clusters(self, toy_ts_file, tmp_path, capsys):
        status = main(["fit", "--data", str(toy_ts_file), "--g", "2", "--out", str(tmp_path / "fit")]
                      + QUIET + FAST)
        assert status == 2
        assert "code=INVALID_CONFIG" in error_line(capsys.readouterr())


class TestSelect:
    """Test `ckmm select`."""

    def test_selection_table(self, tmp_path):
        simulate(tmp_path / "data", count=1)
        status = main(["select", "--data", str(tmp_path / "data" / "dataset_000.csv"), "--g-min", "1",
                       "--g-max", "2", "--out", str(tmp_path / "select")] + QUIET + FAST)
        assert status == 0
        table = pd.read_csv(tmp_path / "select" / "selection.csv", keep_default_na=False)
        assert list(table.columns) == ["G", "loglik", "adjusted_bic", "nec", "selected", "status"]
        assert table["G"].tolist() == [1, 2]
        assert (table["status"] == "ok").all()
        assert "adjusted_bic" in ";".join(table["selected"])
        assert "nec" in ";".join(table["selected"])


class TestEvaluate:
    """Test `ckmm evaluate`."""

    def test_perfect_labels_score_one(self, tmp_path):
        simulate(tmp_path / "data")
        manifest_path = tmp_path / "data" / "manifest.json"
        main(["fit", "--manifest", str(manifest_path), "--g", "2", "--out", str(tmp_path / "fits")] + QUIET + FAST)
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        for entry in manifest["datasets"]:
            labels_path = tmp_path / "fits" / entry["file"].replace(".csv", "") / "labels.csv"
            labels = pd.read_csv(labels_path)
            labels["label"] = entry["labels"]
            labels.to_csv(labels_path, index=False)

        status = main(["evaluate", "--manifest", str(manifest_path), "--fits", str(tmp_path / "fits"),
                       "--out", str(tmp_path / "eval")] + QUIET)
        assert status == 0
        results = pd.read_csv(tmp_path / "eval" / "results.csv")
        assert list(results.columns) == ["scenario", "T", "seed", "dataset", "method", "ARI", "loglik",
                                         "iterations", "runtime_ms"]
        assert np.allclose(results.loc[results["method"] == "ckmm", "ARI"], 1.0)
        assert (results["method"] == "baseline").sum() == 2
        estimators = pd.read_csv(tmp_path / "eval" / "estimators.csv")
        assert set(estimators["quantity"]) == {"kde", "correlation"}
        assert (estimators["mse"] >= 0).all()
        assert (tmp_path / "eval" / "confusion.csv").exists()
        assert "ARI mean(sd)" in (tmp_path / "eval" / "summary.txt").read_text(encoding="utf-8")

    def test_without_manifest(self, tmp_path):
        simulate(tmp_path / "data", count=1)
        main(["fit", "--data", str(tmp_path / "data" / "dataset_000.csv"), "--g", "1",
              "--out", str(tmp_path / "fits")] + QUIET + FAST)
        status = main(["evaluate", "--fits", str(tmp_path / "fits"), "--out", str(tmp_path / "eval")] + QUIET)
        assert status == 0
        results = pd.read_csv(tmp_path / "eval" / "results.csv")
        assert list(results.columns) == ["fit", "G", "loglik", "iterations", "runtime_ms"]
        assert len(results) == 1


class TestScenariosAndFailures:
    """Test `ckmm scenarios` and unexpected failures."""

    def test_scenario_listing(self, tmp_path, capsys):
        assert main(["scenarios", "--out", str(tmp_path)] + QUIET) == 0
        output = capsys.readouterr().out
        for name in ("S1", "S2", "S3", "S4", "S5", "S6"):
            assert name in output

    def test_unexpected_failure_is_internal(self, tmp_path, capsys, monkeypatch):
        def broken(config):
            raise RuntimeError("boom")

        monkeypatch.setattr(ckmm.cli, "cmd_scenarios", broken)
        assert main(["scenarios", "--out", str(tmp_path)] + QUIET) == 1
        line = error_line(capsys.readouterr())
        assert "code=INTERNAL" in line and "boom" in line
