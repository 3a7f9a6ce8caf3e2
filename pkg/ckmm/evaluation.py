"""
Clustering and estimator quality metrics: adjusted Rand index, the
true-parameter baseline classifier, KDE and correlation MSE, plus the
tables used to report them.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from sklearn.metrics import adjusted_rand_score
from sklearn.metrics.cluster import contingency_matrix

from .copula import DEFAULT_RIDGE, copula_log_densities
from .errors import CkmmError
from .margins import CDF_CLIP, MarginSpec, WeightedKde, kde_pdf, margin_cdf, margin_pdf, normal_quantile
from .simulate import Scenario, build_covariance
from .spectral import (
    InvalidDimensionError,
    SpectralCorrelation,
    assemble_full_correlation,
    spectralize_batch,
    toeplitz_to_spectral_blocks,
)

# Configure logging
logger = logging.getLogger(__name__)

# KDE MSE quadrature: [mu - 8 sigma, mu + 8 sigma] with 4001 points
MSE_HALF_WIDTH = 8.0
MSE_GRID_POINTS = 4001


class EvaluationError(CkmmError):
    """Base exception for evaluation."""
    code = "EVALUATION_ERROR"


class LabelMismatchError(EvaluationError):
    """Raised when two label vectors cannot be compared."""
    code = "INVALID_INPUT"


def _validate_labels(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) != len(b):
        raise LabelMismatchError(f"Label vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise LabelMismatchError("Label vectors must not be empty")


def ari(a: Sequence[int], b: Sequence[int]) -> float:
    """
    Hubert-Arabie adjusted Rand index of two partitions.

    Raises:
        LabelMismatchError: If the vectors differ in length or are empty
    """
    a, b = np.asarray(a), np.asarray(b)
    _validate_labels(a, b)
    return float(adjusted_rand_score(a, b))


def confusion_matrix(true_labels: Sequence[int], predicted: Sequence[int]) -> pd.DataFrame:
    """Counts of true classes (rows) against fitted clusters (columns)."""
    _validate_labels(true_labels, predicted)
    return pd.crosstab(pd.Series(np.asarray(true_labels), name="class"),
                       pd.Series(np.asarray(predicted), name="cluster"))


def match_clusters(true_labels: Sequence[int], predicted: Sequence[int]) -> Dict[int, int]:
    """Map each fitted cluster to the true class it overlaps most, one-to-one."""
    _validate_labels(true_labels, predicted)
    true_ids, true_index = np.unique(true_labels, return_inverse=True)
    pred_ids, pred_index = np.unique(predicted, return_inverse=True)
    table = contingency_matrix(true_index, pred_index)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return {int(pred_ids[c]): int(true_ids[r]) for r, c in zip(rows, cols)}


def oracle_posterior(data, scenario: Scenario) -> Tuple[np.ndarray, float]:
    """
    Posterior cluster probabilities with every parameter at its true value.

    Margins are the scenario's parametric densities and CDFs; correlation
    blocks are the circulant approximation of each cluster's true matrix.

    Returns:
        Tuple of (N x 2 posterior, log-likelihood)
    """
    X = np.asarray(getattr(data, "values", data), dtype=float)
    N, D, T = X.shape
    if D != scenario.D:
        raise InvalidDimensionError(f"Scenario has D={scenario.D}, data has D={D}")
    priors = (1.0 - scenario.pi, scenario.pi)
    columns = []
    for g, process in enumerate(scenario.clusters):
        marginal = np.zeros(N)
        scores = np.empty_like(X)
        for d in range(D):
            margin = process.margins[d]
            density = np.maximum(margin_pdf(margin, X[:, d, :]), np.finfo(float).tiny)
            marginal += np.log(density).sum(axis=1)
            scores[:, d, :] = normal_quantile(np.clip(margin_cdf(margin, X[:, d, :]), CDF_CLIP, 1.0 - CDF_CLIP))
        blocks = toeplitz_to_spectral_blocks(build_covariance(scenario, g, T), T, D)
        corr = SpectralCorrelation(blocks=blocks.blocks, ridge=DEFAULT_RIDGE)
        copula = copula_log_densities(spectralize_batch(scores.reshape(N, D * T), T, D), corr)
        columns.append(np.log(priors[g]) + copula + marginal)
    log_joint = np.column_stack(columns)
    lse = logsumexp(log_joint, axis=1, keepdims=True)
    return np.exp(log_joint - lse), float(lse.sum())


def oracle_classify(data, scenario: Scenario) -> np.ndarray:
    """True-parameter baseline labels; ties go to the lowest cluster index."""
    posterior, _ = oracle_posterior(data, scenario)
    return np.argmax(posterior, axis=1)


def kde_mse(kde: WeightedKde, truth: MarginSpec) -> float:
    """Integrated squared error of a KDE against a parametric density."""
    scale = truth.scale
    grid = np.linspace(truth.location - MSE_HALF_WIDTH * scale, truth.location + MSE_HALF_WIDTH * scale,
                       MSE_GRID_POINTS)
    difference = kde_pdf(kde, grid) - margin_pdf(truth, grid)
    return float(trapezoid(difference ** 2, grid))


def correlation_mse(estimate: SpectralCorrelation, truth: np.ndarray) -> float:
    """
    Mean squared entrywise difference between the assembled estimate and a
    dense correlation matrix.

    Raises:
        InvalidDimensionError: If the sizes disagree
    """
    truth = np.asarray(truth, dtype=float)
    size = estimate.T * estimate.D
    if truth.shape != (size, size):
        raise InvalidDimensionError(f"Expected a {size} x {size} matrix, got {truth.shape}")
    return float(np.mean((assemble_full_correlation(estimate) - truth) ** 2))


def cluster_mean_trajectories(data, labels: Sequence[int],
                              feature_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mean value per (cluster, feature, time)."""
    X = np.asarray(getattr(data, "values", data), dtype=float)
    labels = np.asarray(labels)
    _validate_labels(labels, X)
    names = list(feature_names or getattr(data, "feature_names", None) or range(X.shape[1]))
    rows = []
    for cluster in np.unique(labels):
        means = X[labels == cluster].mean(axis=0)
        for d, name in enumerate(names):
            for t in range(X.shape[2]):
                rows.append({"cluster": int(cluster), "feature": name, "time": t, "mean": means[d, t]})
    return pd.DataFrame(rows, columns=["cluster", "feature", "time", "mean"])


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """
    Mean, standard deviation and standard error of ARI per (scenario, T, method).

    ``ari_table`` formats the mean with the standard deviation in
    parentheses, e.g. ``0.9884(0.0220)``.
    """
    grouped = results.groupby(["scenario", "T", "method"], sort=True)
    summary = grouped.agg(datasets=("ARI", "size"), ari_mean=("ARI", "mean"), ari_std=("ARI", "std"),
                          mean_iterations=("iterations", "mean")).reset_index()
    summary["ari_std"] = summary["ari_std"].fillna(0.0)
    summary["ari_se"] = summary["ari_std"] / np.sqrt(summary["datasets"])
    summary["ari_table"] = [f"{m:.4f}({s:.4f})" for m, s in zip(summary["ari_mean"], summary["ari_std"])]
    return summary
