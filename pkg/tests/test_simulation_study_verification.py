"""
Simulation-study verification at full scale.

These runs take from minutes to hours and are skipped unless CKMM_RUN_SLOW=1.
Expected ARI values are the published simulation results for the six
scenarios; tolerances follow the number of datasets used here.
"""

import os
from functools import lru_cache

import numpy as np
import pytest

from ckmm.evaluation import ari, correlation_mse, kde_mse, match_clusters, oracle_classify
from ckmm.mixture import FitConfig, fit
from ckmm.simulate import build_covariance, generate_dataset, get_scenario

pytestmark = [
    pytest.mark.slow,
    pytest.mark.integration,
    pytest.mark.skipif(os.getenv("CKMM_RUN_SLOW") != "1", reason="set CKMM_RUN_SLOW=1 to run"),
]

SEED = 2024
THREADS = os.cpu_count() or 1
# N*T reaches 5000 here; exact kernel sums are too slow for hundreds of fits
EVALUATION = "binned"


@lru_cache(maxsize=None)
def dataset(name, T, index):
    return generate_dataset(get_scenario(name, T=T), SEED, index)


@lru_cache(maxsize=None)
def full_fit(name, T, index):
    data, _ = dataset(name, T, index)
    return fit(data, 2, FitConfig(restarts=10, seed=SEED + index, threads=THREADS, kde_evaluation=EVALUATION))


def mean_fit_ari(name, T, count=20):
    return float(np.mean([ari(dataset(name, T, i)[1], full_fit(name, T, i).labels) for i in range(count)]))


@pytest.mark.parametrize("name", ["S1", "S2", "S3", "S4", "S5", "S6"])
@pytest.mark.parametrize("T", [20, 30, 50])
def test_loglik_traces_are_monotone(name, T):
    """
    **Feature: ckmm, Property 15: GEM monotonicity on every scenario**

    Five seeds per (scenario, T); every step of every trace is nondecreasing.
    """
    for index in range(5):
        data, _ = dataset(name, T, index)
        result = fit(data, 2, FitConfig(restarts=1, seed=index, threads=1, kde_evaluation=EVALUATION))
        trace = np.array(result.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[1:]))), f"{name} T={T} #{index}"


@pytest.mark.parametrize("name,T,expected", [
    ("S1", 20, 0.5799),
    ("S3", 50, 0.9952),
    ("S5", 30, 0.9320),
])
def test_baseline_ari(name, T, expected):
    scores = [ari(labels, oracle_classify(data, get_scenario(name, T=T)))
              for data, labels in (dataset(name, T, i) for i in range(100))]
    assert np.mean(scores) == pytest.approx(expected, abs=0.03)


@pytest.mark.parametrize("name,T,expected", [
    ("S3", 50, 0.9884),
    ("S5", 50, 0.9847),
    ("S1", 20, 0.2186),
])
def test_fitted_ari(name, T, expected):
    assert mean_fit_ari(name, T) == pytest.approx(expected, abs=0.10)


def test_fitted_ari_orderings():
    by_scenario = {name: mean_fit_ari(name, 50) for name in ("S1", "S2", "S3")}
    assert by_scenario["S1"] < by_scenario["S2"] < by_scenario["S3"]
    for name in ("S1", "S2", "S3"):
        assert mean_fit_ari(name, 20) < by_scenario[name]


@pytest.mark.parametrize("name", ["S1", "S3"])
def test_estimator_errors_shrink_with_length(name):
    """
    **Feature: ckmm, Property 16: Estimator consistency**

    Mean KDE and correlation MSE over matched clusters decrease from T=20 to T=50.
    """
    def mean_errors(T):
        scenario = get_scenario(name, T=T)
        kde_errors, corr_errors = [], []
        for i in range(20):
            _, labels = dataset(name, T, i)
            model = full_fit(name, T, i).model
            for fitted, true in match_clusters(labels, full_fit(name, T, i).labels).items():
                process = scenario.clusters[true]
                kde_errors.extend(kde_mse(model.kdes[fitted][d], process.margins[d]) for d in range(2))
                corr_errors.append(correlation_mse(model.corr[fitted], build_covariance(scenario, true, T)))
        return np.mean(kde_errors), np.mean(corr_errors)

    kde_short, corr_short = mean_errors(20)
    kde_long, corr_long = mean_errors(50)
    assert kde_long < kde_short
    assert corr_long < corr_short
