"""
Unit tests for error handling scenarios across the package.

Tests error codes, degenerate estimation inputs, graceful degradation of the
model-selection sweep and configuration validation.
"""

import numpy as np
import pandas as pd
import pytest

import ckmm.cli
import ckmm.mixture
from config import ConfigurationError
from ckmm.cli import OutputError, main
from ckmm.copula import SingularCorrelationError, copula_log_densities
from ckmm.data_io import DataFormatError, ModelFormatError, UnbalancedDataError, write_dataset_csv
from ckmm.errors import CkmmError
from ckmm.evaluation import LabelMismatchError
from ckmm.margins import DegenerateClusterError, MarginDomainError
from ckmm.mixture import FitConfig, FitConfigError, MixtureError, NumericalUnderflowError, fit, model_from_labels
from ckmm.simulate import InfeasibleScenarioError, UnknownScenarioError
from ckmm.spectral import InconsistentBlocksError, InvalidDimensionError, InvalidInputError, SpectralCorrelation

QUIET = ["--seed", "1", "--threads", "1", "--log-level", "WARNING", "--restarts", "1", "--max-iterations", "3"]


class TestErrorCodes:
    """Every failure carries a stable machine-readable code."""

    @pytest.mark.parametrize("error_class,code", [
        (InvalidDimensionError, "INVALID_DIMENSION"),
        (InvalidInputError, "INVALID_INPUT"),
        (InconsistentBlocksError, "INCONSISTENT_BLOCKS"),
        (DegenerateClusterError, "DEGENERATE_CLUSTER"),
        (MarginDomainError, "DOMAIN_ERROR"),
        (FitConfigError, "INVALID_CONFIG"),
        (NumericalUnderflowError, "NUMERICAL_UNDERFLOW"),
        (UnknownScenarioError, "UNKNOWN_SCENARIO"),
        (InfeasibleScenarioError, "INFEASIBLE_SCENARIO"),
        (DataFormatError, "FORMAT_ERROR"),
        (UnbalancedDataError, "UNBALANCED_DATA"),
        (ModelFormatError, "MODEL_FORMAT_ERROR"),
        (LabelMismatchError, "INVALID_INPUT"),
        (ConfigurationError, "INVALID_CONFIG"),
        (OutputError, "OUTPUT_ERROR"),
    ])
    def test_codes(self, error_class, code):
        assert issubclass(error_class, CkmmError)
        assert error_class.code == code

    def test_singular_correlation_reports_frequency(self):
        blocks = np.broadcast_to(np.eye(2, dtype=np.complex128), (4, 2, 2)).copy()
        blocks[2] = [[1.0, 2.0], [2.0, 1.0]]
        corr = SpectralCorrelation(blocks=blocks, ridge=0.0)
        with pytest.raises(SingularCorrelationError) as excinfo:
            copula_log_densities(np.zeros((1, 4, 2), dtype=np.complex128), corr)
        assert excinfo.value.frequency == 2
        assert excinfo.value.code == "SINGULAR_CORRELATION"


class TestEstimationErrors:
    """Test degenerate estimation inputs."""

    def test_empty_initial_cluster(self, separated_dataset):
        dataset, _ = separated_dataset
        with pytest.raises(DegenerateClusterError):
            model_from_labels(dataset, np.zeros(dataset.N, dtype=int), 2)

    def test_labels_out_of_range(self, separated_dataset):
        dataset, _ = separated_dataset
        with pytest.raises(MixtureError):
            model_from_labels(dataset, np.full(dataset.N, 3), 2)

    def test_non_finite_data(self):
        values = np.ones((5, 2, 3))
        values[0, 0, 0] = np.inf
        with pytest.raises(MixtureError):
            fit(values, 1, FitConfig(restarts=1))

    @pytest.mark.parametrize("G", [1, 2])
    def test_cluster_count_not_below_subjects(self, G):
        values = np.random.default_rng(0).standard_normal((G, 2, 3))
        with pytest.raises(FitConfigError):
            fit(values, G, FitConfig(restarts=1))

    def test_all_restarts_failing(self, separated_dataset, monkeypatch):
        dataset, _ = separated_dataset

        def failing_restart(*args, **kwargs):
            raise DegenerateClusterError("empty cluster")

        monkeypatch.setattr(ckmm.mixture, "_single_restart", failing_restart)
        with pytest.raises(MixtureError) as excinfo:
            fit(dataset, 2, FitConfig(restarts=2, threads=1))
        assert "All restarts failed" in str(excinfo.value)

    def test_one_failing_restart_is_tolerated(self, separated_dataset, monkeypatch):
        dataset, _ = separated_dataset
        original = ckmm.mixture._single_restart

        def flaky_restart(X, G, config, restart_index, seed, fixed_correlation):
            if restart_index == 0:
                raise DegenerateClusterError("empty cluster")
            return original(X, G, config, restart_index, seed, fixed_correlation)

        monkeypatch.setattr(ckmm.mixture, "_single_restart", flaky_restart)
        result = fit(dataset, 2, FitConfig(restarts=2, max_iterations=3, threads=1))
        assert result.restart_index == 1


class TestSelectionDegradation:
    """The model-selection sweep survives failing candidates."""

    @pytest.fixture
    def dataset_path(self, separated_dataset, tmp_path):
        dataset, _ = separated_dataset
        path = tmp_path / "data.csv"
        write_dataset_csv(dataset, path)
        return path

    def test_failed_candidate_is_flagged(self, dataset_path, tmp_path, monkeypatch):
        real_fit = ckmm.cli.fit

        def fit_without_three(data, G, config, **kwargs):
            if G == 3:
                raise DegenerateClusterError("empty cluster")
            return real_fit(data, G, config, **kwargs)

        monkeypatch.setattr(ckmm.cli, "fit", fit_without_three)
        status = main(["select", "--data", str(dataset_path), "--g-min", "1", "--g-max", "3",
                       "--out", str(tmp_path / "select")] + QUIET)
        assert status == 0
        table = pd.read_csv(tmp_path / "select" / "selection.csv", keep_default_na=False)
        assert table["status"].tolist() == ["ok", "ok", "failed:DEGENERATE_CLUSTER"]

    def test_reference_fit_failure_defaults_nec_one(self, dataset_path, tmp_path, monkeypatch):
        real_fit = ckmm.cli.fit

        def fit_without_reference(data, G, config, fixed_correlation=None, **kwargs):
            if fixed_correlation is not None:
                raise SingularCorrelationError(0)
            return real_fit(data, G, config, **kwargs)

        monkeypatch.setattr(ckmm.cli, "fit", fit_without_reference)
        status = main(["select", "--data", str(dataset_path), "--g-min", "1", "--g-max", "2",
                       "--out", str(tmp_path / "select")] + QUIET)
        assert status == 0
        table = pd.read_csv(tmp_path / "select" / "selection.csv")
        assert table.loc[table["G"] == 1, "nec"].item() == 1.0


class TestConfigurationErrors:
    """Test configuration failures surface as INVALID_CONFIG."""

    def test_conflicting_scenario_sources(self, tmp_path, capsys):
        status = main(["simulate", "--scenario", "S1", "--scenario-file", "custom.json",
                       "--out", str(tmp_path)] + QUIET[:6])
        assert status == 2
        assert "code=INVALID_CONFIG" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        status = main(["scenarios", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
        assert status == 2
        assert "code=INVALID_CONFIG" in capsys.readouterr().err
