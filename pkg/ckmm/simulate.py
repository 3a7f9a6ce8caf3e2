"""
Simulation scenarios for two-cluster bivariate longitudinal data.

Each cluster is a bivariate moving-average process (MA(1) per feature in the
first cluster, MA(2) per feature in the second) with correlated errors. The
implied Toeplitz-block correlation matrix drives a Gaussian copula whose
margins are the normal and Student t distributions with matching variances.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .data_io import LongitudinalDataset
from .errors import CkmmError
from .margins import MarginSpec, margin_quantile

# Configure logging
logger = logging.getLogger(__name__)

RHO_TOLERANCE = 1e-4
DEFAULT_PRIOR = 0.4
DEFAULT_SUBJECTS = 100
DEFAULT_TIMES = 50

# Timeout for generating one dataset (seconds)
GENERATION_TIMEOUT = 600


class SimulationError(CkmmError):
    """Base exception for scenario simulation."""
    code = "SIMULATION_ERROR"


class InfeasibleScenarioError(SimulationError):
    """Raised when a scenario implies an invalid error correlation or a non-PD matrix."""
    code = "INFEASIBLE_SCENARIO"


class UnknownScenarioError(SimulationError):
    """Raised when a scenario id is not in the catalog."""
    code = "UNKNOWN_SCENARIO"


@dataclass(frozen=True)
class ClusterProcess:
    """
    Bivariate MA process of one cluster.

    ``theta[i]`` holds (theta_i1, theta_i2) for feature i; theta_i2 = 0 gives
    an MA(1) feature.
    """
    theta: Tuple[Tuple[float, float], Tuple[float, float]]
    rho_cross: float
    rho_eps: float
    margins: Tuple[MarginSpec, MarginSpec]
    var_eps: float = 1.0

    def ma_coefficients(self, feature: int) -> np.ndarray:
        return np.array([1.0, *self.theta[feature]])


@dataclass(frozen=True)
class Scenario:
    """A two-cluster simulation design."""
    name: str
    clusters: Tuple[ClusterProcess, ClusterProcess]
    pi: float = DEFAULT_PRIOR
    n_subjects: int = DEFAULT_SUBJECTS
    T: int = DEFAULT_TIMES

    @property
    def D(self) -> int:
        return 2

    @property
    def G(self) -> int:
        return len(self.clusters)

    def validate(self) -> None:
        """
        Check the scenario invariants.

        Raises:
            InfeasibleScenarioError: Listing every violated invariant
        """
        errors = []
        if not 0 < self.pi < 1:
            errors.append(f"pi must lie in (0, 1), got {self.pi}")
        if self.n_subjects < 2:
            errors.append(f"n_subjects must be at least 2, got {self.n_subjects}")
        if self.T < 1:
            errors.append(f"T must be positive, got {self.T}")
        for g, process in enumerate(self.clusters):
            if not process.var_eps > 0:
                errors.append(f"cluster {g}: var_eps must be positive")
            if abs(process.rho_eps) >= 1:
                errors.append(f"cluster {g}: |rho_eps| must be below 1, got {process.rho_eps}")
                continue
            implied = cross_correlation_from_error(process.theta, process.rho_eps)
            if abs(implied - process.rho_cross) > RHO_TOLERANCE:
                errors.append(f"cluster {g}: rho_eps {process.rho_eps} implies rho_cross {implied:.6f}, "
                              f"not {process.rho_cross}")
        if errors:
            raise InfeasibleScenarioError(f"Scenario {self.name} invalid: {'; '.join(errors)}")


def _lag_product(a: np.ndarray, b: np.ndarray, k: int) -> float:
    """sum_s a[s] b[s + k] for MA coefficient vectors."""
    total = 0.0
    for s in range(len(a)):
        if 0 <= s + k < len(b):
            total += a[s] * b[s + k]
    return total


def _cross_factor(theta) -> Tuple[float, float]:
    a1 = np.array([1.0, *theta[0]])
    a2 = np.array([1.0, *theta[1]])
    return _lag_product(a1, a2, 0), float(np.sqrt(np.sum(a1 ** 2) * np.sum(a2 ** 2)))


def cross_correlation_from_error(theta, rho_eps: float) -> float:
    """Lag-0 feature correlation implied by the error correlation."""
    numerator, denominator = _cross_factor(theta)
    return rho_eps * numerator / denominator


def error_correlation_from_target(theta, rho_cross: float) -> float:
    """
    Error correlation that yields the target lag-0 cross-correlation.

    rho_eps = rho_cross * sqrt(sum a1^2 * sum a2^2) / sum a1 a2 with
    a_i = (1, theta_i1, theta_i2); for MA(1) features this is
    rho_cross * sqrt((1 + theta_11^2)(1 + theta_21^2)) / (1 + theta_11 theta_21).

    Raises:
        InfeasibleScenarioError: If |rho_cross| >= 1 or the implied |rho_eps| >= 1
    """
    if abs(rho_cross) >= 1:
        raise InfeasibleScenarioError(f"|rho_cross| must be below 1, got {rho_cross}")
    numerator, denominator = _cross_factor(theta)
    if numerator == 0:
        if rho_cross == 0:
            return 0.0
        raise InfeasibleScenarioError("Coefficients give zero lag-0 cross-covariance")
    rho_eps = rho_cross * denominator / numerator
    if abs(rho_eps) >= 1:
        raise InfeasibleScenarioError(f"Target rho_cross {rho_cross} needs |rho_eps| = {abs(rho_eps):.4f} >= 1")
    return rho_eps


def lag_covariances(process: ClusterProcess) -> Dict[Tuple[int, int], Dict[int, float]]:
    """
    Non-zero covariances gamma_ij(k) = cov(X_i,t, X_j,t+k) of a cluster process.

    gamma_ij(k) = c_ij sum_s a_i[s] a_j[s + k] where c_ii = var_eps and
    c_12 = rho_eps * var_eps.
    """
    covariances = {}
    max_lag = 2
    for i in range(2):
        for j in range(2):
            scale = process.var_eps if i == j else process.rho_eps * process.var_eps
            a_i, a_j = process.ma_coefficients(i), process.ma_coefficients(j)
            covariances[(i, j)] = {
                k: scale * _lag_product(a_i, a_j, k) for k in range(-max_lag, max_lag + 1)
            }
    return covariances


def build_covariance(scenario: Scenario, cluster: int, T: Optional[int] = None) -> np.ndarray:
    """
    Feature-major (2T x 2T) correlation matrix of one cluster.

    Args:
        scenario: Simulation design
        cluster: Cluster index (0 or 1)
        T: Number of time points, defaults to scenario.T

    Returns:
        Symmetric positive definite correlation matrix with unit diagonal

    Raises:
        InfeasibleScenarioError: If the matrix is not positive definite
    """
    T = scenario.T if T is None else T
    process = scenario.clusters[cluster]
    covariances = lag_covariances(process)
    D = 2
    lags = np.subtract.outer(np.arange(T), np.arange(T)).T  # lags[s, t] = t - s
    cov = np.zeros((D * T, D * T))
    for (i, j), by_lag in covariances.items():
        block = np.zeros((T, T))
        for k, value in by_lag.items():
            block[lags == k] = value
        cov[i * T:(i + 1) * T, j * T:(j + 1) * T] = block

    scale = 1.0 / np.sqrt(np.diag(cov))
    corr = cov * scale[:, None] * scale[None, :]
    try:
        np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise InfeasibleScenarioError(f"Scenario {scenario.name} cluster {cluster} correlation is not positive definite")
    return corr


def feature_variance(process: ClusterProcess, feature: int) -> float:
    """Stationary variance (1 + theta_i1^2 + theta_i2^2) var_eps."""
    return float(process.var_eps * np.sum(process.ma_coefficients(feature) ** 2))


def _table_margins(normal_variance: float, t_df: float) -> Tuple[MarginSpec, MarginSpec]:
    return (MarginSpec(family="normal", mean=1.0, variance=normal_variance),
            MarginSpec(family="student_t", df=t_df))


CLUSTER_ONE_THETA = ((-0.2679, 0.0), (0.6268, 0.0))
CLUSTER_TWO_THETA = ((0.2532, 0.0533), (0.5, 0.0))
CLUSTER_ONE_MARGINS = _table_margins(1.0718, 7.0908)
CLUSTER_TWO_MARGINS = _table_margins(1.0669, 10.0)

# (rho_cross, rho_eps) per cluster
_CATALOG_RHO = {
    "S1": ((0.0, 0.0), (0.0, 0.0)),
    "S2": ((0.25, 0.3671), (0.25, 0.2562)),
    "S3": ((0.5, 0.7342), (0.5, 0.5125)),
    "S4": ((0.0, 0.0), (0.25, 0.2562)),
    "S5": ((0.0, 0.0), (0.5, 0.5125)),
    "S6": ((0.25, 0.3671), (0.5, 0.5125)),
}


def scenario_catalog() -> Dict[str, Scenario]:
    """The six two-cluster designs S1-S6."""
    catalog = {}
    for name, ((rho1, eps1), (rho2, eps2)) in _CATALOG_RHO.items():
        catalog[name] = Scenario(
            name=name,
            clusters=(
                ClusterProcess(theta=CLUSTER_ONE_THETA, rho_cross=rho1, rho_eps=eps1, margins=CLUSTER_ONE_MARGINS),
                ClusterProcess(theta=CLUSTER_TWO_THETA, rho_cross=rho2, rho_eps=eps2, margins=CLUSTER_TWO_MARGINS),
            ),
        )
    return catalog


def get_scenario(name: str, T: Optional[int] = None, n_subjects: Optional[int] = None) -> Scenario:
    """
    Look up a catalog scenario, optionally overriding T and N.

    Raises:
        UnknownScenarioError: If the name is not S1-S6
    """
    catalog = scenario_catalog()
    if name not in catalog:
        raise UnknownScenarioError(f"Unknown scenario {name!r}; expected one of {sorted(catalog)}")
    scenario = catalog[name]
    if T is not None:
        scenario = replace(scenario, T=T)
    if n_subjects is not None:
        scenario = replace(scenario, n_subjects=n_subjects)
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "name": scenario.name,
        "pi": scenario.pi,
        "n_subjects": scenario.n_subjects,
        "T": scenario.T,
        "clusters": [
            {
                "theta": [list(row) for row in process.theta],
                "rho_cross": process.rho_cross,
                "rho_eps": process.rho_eps,
                "var_eps": process.var_eps,
                "margins": [margin.to_dict() for margin in process.margins],
            }
            for process in scenario.clusters
        ],
    }


def scenario_from_dict(data: dict) -> Scenario:
    """
    Build and validate a scenario from its dictionary form.

    ``rho_eps`` may be omitted, in which case it is derived from ``rho_cross``.

    Raises:
        InfeasibleScenarioError: If the description is malformed or infeasible
    """
    try:
        clusters = []
        for entry in data["clusters"]:
            theta = tuple(tuple(float(v) for v in row) for row in entry["theta"])
            if len(theta) != 2 or any(len(row) != 2 for row in theta):
                raise InfeasibleScenarioError("theta must be two pairs (theta_i1, theta_i2)")
            rho_cross = float(entry["rho_cross"])
            rho_eps = entry.get("rho_eps")
            rho_eps = error_correlation_from_target(theta, rho_cross) if rho_eps is None else float(rho_eps)
            margins = tuple(MarginSpec.from_dict(m) for m in entry["margins"])
            clusters.append(ClusterProcess(theta=theta, rho_cross=rho_cross, rho_eps=rho_eps,
                                           margins=margins, var_eps=float(entry.get("var_eps", 1.0))))
        if len(clusters) != 2:
            raise InfeasibleScenarioError(f"A scenario needs exactly two clusters, got {len(clusters)}")
        scenario = Scenario(name=str(data.get("name", "custom")), clusters=tuple(clusters),
                            pi=float(data.get("pi", DEFAULT_PRIOR)),
                            n_subjects=int(data.get("n_subjects", DEFAULT_SUBJECTS)),
                            T=int(data.get("T", DEFAULT_TIMES)))
    except (KeyError, TypeError, ValueError) as e:
        raise InfeasibleScenarioError(f"Malformed scenario description: {e}")
    scenario.validate()
    return scenario


def dataset_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Seed of dataset ``index`` in a batch started from ``seed``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


def generate_dataset(scenario: Scenario, seed, index: int = 0) -> Tuple[LongitudinalDataset, np.ndarray]:
    """
    Draw one dataset from a scenario.

    Labels are Bernoulli(pi) (label 1 is the second cluster); each subject's
    normal scores are drawn with the label's correlation matrix through its
    Cholesky factor, mapped through the standard normal CDF and then through
    the margin quantiles.

    Args:
        scenario: Simulation design
        seed: Integer seed or SeedSequence
        index: Dataset index within a batch (ignored for SeedSequence seeds)

    Returns:
        Tuple of (dataset, true labels)
    """
    seed_sequence = seed if isinstance(seed, np.random.SeedSequence) else dataset_seed(int(seed), index)
    rng = np.random.Generator(np.random.Philox(seed_sequence))
    N, T, D = scenario.n_subjects, scenario.T, scenario.D

    labels = (rng.random(N) < scenario.pi).astype(int)
    innovations = rng.standard_normal((N, D * T))
    values = np.empty((N, D, T))
    for g, process in enumerate(scenario.clusters):
        members = labels == g
        if not np.any(members):
            continue
        factor = np.linalg.cholesky(build_covariance(scenario, g, T))
        scores = innovations[members] @ factor.T
        uniforms = np.clip(special.ndtr(scores), 1e-16, 1.0 - 1e-16).reshape(-1, D, T)
        for d in range(D):
            values[members, d, :] = margin_quantile(process.margins[d], uniforms[:, d, :])

    dataset = LongitudinalDataset(values=values, subject_ids=[f"s{n:04d}" for n in range(N)],
                                  feature_names=[f"x{d + 1}" for d in range(D)])
    return dataset, labels


def generate_batch(scenario: Scenario, seed: int, count: int,
                   threads: int = 1) -> List[Tuple[LongitudinalDataset, np.ndarray]]:
    """
    Generate ``count`` datasets; dataset i depends only on (seed, i).

    Raises:
        SimulationError: If count is not positive
    """
    if count < 1:
        raise SimulationError(f"count must be positive, got {count}")
    scenario.validate()
    start_time = time.time()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = [executor.submit(generate_dataset, scenario, seed, i) for i in range(count)]
        datasets = [future.result(timeout=GENERATION_TIMEOUT) for future in futures]
    logger.info(f"Generated {count} datasets for {scenario.name} (T={scenario.T}) "
                f"in {time.time() - start_time:.2f}s")
    return datasets


def true_margins(scenario: Scenario) -> List[Sequence[MarginSpec]]:
    """Margins per cluster, indexed [cluster][feature]."""
    return [process.margins for process in scenario.clusters]
