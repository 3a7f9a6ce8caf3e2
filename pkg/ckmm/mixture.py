"""
Generalized EM estimation of the copula kernel mixture model and model
selection by adjusted BIC and the normalized entropy criterion.

Each iteration runs the E-step with the current parameters, then the four
M-sub-steps per cluster: KDE update, bandwidth search, correlation update
and, once for all clusters, the mixing proportions. Every sub-step is accepted
only if it does not decrease the expected complete-data log-likelihood of the
cluster it touches, so the observed pseudo log-likelihood never decreases.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, xlogy
from sklearn.cluster import KMeans

from .copula import DEFAULT_RIDGE, copula_log_densities, estimate_blocks
from .errors import CkmmError
from .margins import (
    DegenerateClusterError,
    WeightedKde,
    kde_cdf,
    kde_update,
    normal_quantile,
    silverman_bandwidth,
    smoothed_log_density,
    smoother_trace,
)
from .spectral import SpectralCorrelation, spectralize_batch

# Configure logging
logger = logging.getLogger(__name__)

# Smallest mixing proportion kept; keeps log(pi) finite for emptied clusters
MIN_PROPORTION = 1e-300

# Timeout for a single restart (seconds)
RESTART_TIMEOUT = 24 * 3600

# "exact" sums every kernel; "binned" uses the KdeGrid approximation
KDE_EVALUATIONS = ("exact", "binned")


class MixtureError(CkmmError):
    """Base exception for mixture estimation."""
    code = "MIXTURE_ERROR"


class FitConfigError(MixtureError):
    """Raised when a FitConfig or cluster count is invalid."""
    code = "INVALID_CONFIG"


class NumericalUnderflowError(MixtureError):
    """Raised when every cluster of a subject has zero density."""
    code = "NUMERICAL_UNDERFLOW"


@dataclass
class FitConfig:
    """GEM settings."""
    epsilon: float = 1e-5
    max_iterations: int = 200
    restarts: int = 10
    eta: float = 1e-2
    delta_h: float = 1e-2  # first step is h0 * (1 + delta_h)
    bandwidth_bounds: Tuple[float, float] = (0.05, 3.0)
    max_bandwidth_substeps: int = 10
    bandwidth_tolerance: float = 1e-6
    min_bandwidth_spread: float = 1e-4
    ridge: float = DEFAULT_RIDGE
    kmeans_iterations: int = 50
    kmeans_reseeds: int = 5
    seed: int = 0
    threads: int = 1
    kde_evaluation: str = "exact"

    def validate(self) -> None:
        """
        Validate GEM settings.

        Raises:
            FitConfigError: Listing every invalid field
        """
        errors = []
        for name in ("epsilon", "eta", "delta_h", "bandwidth_tolerance"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and np.isfinite(value) and value > 0):
                errors.append(f"{name} must be positive, got {value!r}")
        for name in ("max_iterations", "restarts", "max_bandwidth_substeps", "kmeans_iterations", "threads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                errors.append(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.kmeans_reseeds, int) or self.kmeans_reseeds < 0:
            errors.append(f"kmeans_reseeds must be a non-negative integer, got {self.kmeans_reseeds!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.ridge < 0:
            errors.append(f"ridge must be non-negative, got {self.ridge}")
        if self.min_bandwidth_spread < 0:
            errors.append(f"min_bandwidth_spread must be non-negative, got {self.min_bandwidth_spread}")
        try:
            low, high = self.bandwidth_bounds
            if not 0 < low <= 1.0 <= high:
                errors.append(f"bandwidth_bounds must satisfy 0 < low <= 1 <= high, got {self.bandwidth_bounds}")
        except (TypeError, ValueError):
            errors.append(f"bandwidth_bounds must be a pair, got {self.bandwidth_bounds!r}")
        if self.kde_evaluation not in KDE_EVALUATIONS:
            errors.append(f"kde_evaluation must be one of {list(KDE_EVALUATIONS)}, got {self.kde_evaluation!r}")
        if errors:
            raise FitConfigError(f"Fit configuration invalid: {'; '.join(errors)}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["bandwidth_bounds"] = list(self.bandwidth_bounds)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        data = dict(data)
        if "bandwidth_bounds" in data:
            data["bandwidth_bounds"] = tuple(data["bandwidth_bounds"])
        return cls(**data)


@dataclass
class CkmmModel:
    """
    Fitted parameters: mixing proportions, per-cluster spectral correlation,
    per-(cluster, feature) KDEs and the Silverman reference bandwidths the
    bandwidth bounds are relative to.
    """
    pis: np.ndarray
    corr: List[SpectralCorrelation]
    kdes: List[List[WeightedKde]]
    reference_bandwidths: np.ndarray
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def G(self) -> int:
        return len(self.pis)

    @property
    def D(self) -> int:
        return len(self.kdes[0])

    @property
    def T(self) -> int:
        return self.corr[0].T

    @property
    def bandwidths(self) -> np.ndarray:
        return np.array([[kde.bandwidth for kde in row] for row in self.kdes])


@dataclass
class FitResult:
    """Outcome of a GEM run."""
    model: CkmmModel
    responsibilities: np.ndarray
    labels: np.ndarray
    loglik_trace: List[float]
    iterations: int
    converged: bool
    restart_index: int = 0
    warnings: Tuple[str, ...] = ()

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


@dataclass
class BandwidthSearch:
    """Result of the secant bandwidth search for one (feature, cluster)."""
    bandwidth: float
    objective: float
    visited: List[Tuple[float, float]]
    stop_reason: str


@dataclass
class NecResult:
    """Normalized entropy criterion per G and the selected cluster count."""
    values: Dict[int, float]
    nec_one: float
    best_multi: Optional[int]
    selected: int
    warnings: Tuple[str, ...] = ()


@dataclass
class _ClusterTerms:
    quantiles: np.ndarray  # (N, D, T) normal scores
    marginal: np.ndarray  # (D, N) summed smoothed log-densities
    spectral: np.ndarray  # (N, T, D)
    copula: Optional[np.ndarray] = None  # (N,)

    def total(self) -> np.ndarray:
        return self.copula + self.marginal.sum(axis=0)


def _as_array(data) -> np.ndarray:
    """Accept a LongitudinalDataset-like object or an (N, D, T) array."""
    values = getattr(data, "values", data)
    X = np.asarray(values, dtype=float)
    if X.ndim != 3 or min(X.shape) < 1:
        raise MixtureError(f"Data must be an (N, D, T) array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise MixtureError("Data must be finite")
    return X


def _validate_cluster_count(X: np.ndarray, G: int) -> None:
    N = X.shape[0]
    if not isinstance(G, (int, np.integer)) or G < 1:
        raise FitConfigError(f"G must be a positive integer, got {G!r}")
    if G >= N:
        raise FitConfigError(f"G must be smaller than the number of subjects ({N}), got {G}")


def _feature_terms(x_d: np.ndarray, kde: WeightedKde,
                   evaluation: str = "exact") -> Tuple[np.ndarray, np.ndarray]:
    """Normal scores and per-subject smoothed log-density of one feature."""
    if evaluation == "binned":
        grid = kde.grid
        return normal_quantile(grid.cdf_at(x_d)), grid.smoothed_log_density_at(x_d).sum(axis=1)
    quantiles = normal_quantile(kde_cdf(kde, x_d))
    marginal = smoothed_log_density(kde, x_d, kde.bandwidth).sum(axis=1)
    return quantiles, marginal


def _cluster_terms(X: np.ndarray, kdes_g: Sequence[WeightedKde], corr_g: Optional[SpectralCorrelation] = None,
                   evaluation: str = "exact") -> _ClusterTerms:
    N, D, T = X.shape
    quantiles = np.empty_like(X)
    marginal = np.empty((D, N))
    for d in range(D):
        quantiles[:, d, :], marginal[d] = _feature_terms(X[:, d, :], kdes_g[d], evaluation)
    spectral = spectralize_batch(quantiles.reshape(N, D * T), T, D)
    terms = _ClusterTerms(quantiles=quantiles, marginal=marginal, spectral=spectral)
    if corr_g is not None:
        terms.copula = copula_log_densities(spectral, corr_g)
    return terms


def _with_feature(X: np.ndarray, terms: _ClusterTerms, d: int, kde: WeightedKde,
                  corr_g: SpectralCorrelation, evaluation: str = "exact") -> _ClusterTerms:
    """Terms of a cluster after replacing the KDE of feature d."""
    N, D, T = X.shape
    quantiles = terms.quantiles.copy()
    marginal = terms.marginal.copy()
    quantiles[:, d, :], marginal[d] = _feature_terms(X[:, d, :], kde, evaluation)
    spectral = spectralize_batch(quantiles.reshape(N, D * T), T, D)
    return _ClusterTerms(quantiles=quantiles, marginal=marginal, spectral=spectral,
                         copula=copula_log_densities(spectral, corr_g))


def _cluster_objective(weights: np.ndarray, terms: _ClusterTerms) -> float:
    """Cluster share of the expected complete-data log-likelihood, without prior and entropy terms."""
    return float(weights @ terms.total())


def _log_joint(X: np.ndarray, model: CkmmModel) -> np.ndarray:
    """log pi_g + copula + smoothed marginal terms, shape (N, G)."""
    columns = []
    for g in range(model.G):
        terms = _cluster_terms(X, model.kdes[g], model.corr[g], model.config.kde_evaluation)
        columns.append(np.log(model.pis[g]) + terms.total())
    return np.column_stack(columns)


def _normalise(log_joint: np.ndarray) -> Tuple[np.ndarray, float]:
    row_max = np.max(log_joint, axis=1)
    if not np.all(np.isfinite(row_max)):
        bad = int(np.flatnonzero(~np.isfinite(row_max))[0])
        raise NumericalUnderflowError(f"Subject {bad} has zero density under every cluster")
    lse = logsumexp(log_joint, axis=1)
    responsibilities = np.exp(log_joint - lse[:, None])
    responsibilities /= responsibilities.sum(axis=1, keepdims=True)
    return responsibilities, float(lse.sum())


def e_step(data, model: CkmmModel) -> Tuple[np.ndarray, float]:
    """
    Posterior cluster probabilities under the current model.

    Args:
        data: (N, D, T) array or LongitudinalDataset
        model: Current parameters

    Returns:
        Tuple of (N x G responsibilities, observed pseudo log-likelihood)

    Raises:
        NumericalUnderflowError: If a subject has zero density in every cluster
    """
    return _normalise(_log_joint(_as_array(data), model))


def labels_from_responsibilities(responsibilities: np.ndarray) -> np.ndarray:
    """Argmax cluster per subject; ties go to the lowest cluster index."""
    return np.argmax(responsibilities, axis=1)


def entropy(responsibilities: np.ndarray) -> float:
    """Classification entropy -sum p log p with 0 log 0 = 0."""
    return float(-np.sum(xlogy(responsibilities, responsibilities)))


def classification_loglik(data, responsibilities: np.ndarray, model: CkmmModel) -> float:
    """C(G) = sum_n sum_g p_ng log(pi_g f_g(x_n))."""
    log_joint = _log_joint(_as_array(data), model)
    return float(np.sum(np.where(responsibilities > 0, responsibilities * log_joint, 0.0)))


def pseudo_complete_loglik(data, responsibilities: np.ndarray, model: CkmmModel) -> float:
    """
    Expected complete-data log-likelihood including the entropy term.

    Equals classification_loglik + entropy; for posterior responsibilities it
    equals the observed pseudo log-likelihood.
    """
    return classification_loglik(data, responsibilities, model) + entropy(responsibilities)


def m_step_priors(responsibilities: np.ndarray) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """
    Mixing proportions pi_g = mean_n p_ng.

    Returns:
        Tuple of (proportions, degenerate-cluster warnings)
    """
    responsibilities = np.asarray(responsibilities, dtype=float)
    N = responsibilities.shape[0]
    pis = responsibilities.sum(axis=0) / N
    warnings = []
    for g, pi in enumerate(pis):
        if pi < 1.0 / (10 * N):
            message = f"Degenerate cluster {g}: mixing proportion {pi:.3e} below 1/(10N)"
            logger.warning(message)
            warnings.append(message)
    pis = np.maximum(pis, MIN_PROPORTION)
    return pis / pis.sum(), tuple(warnings)


def m_step_kde(data, responsibilities: np.ndarray, model: CkmmModel, guard: bool = False) -> List[List[WeightedKde]]:
    """
    Weighted KDE of every (cluster, feature) at the model's current bandwidths.

    Clusters with zero total responsibility keep their previous KDEs. With
    ``guard`` a feature's new KDE is kept only if it does not lower its
    cluster's expected complete-data log-likelihood.
    """
    X = _as_array(data)
    evaluation = model.config.kde_evaluation
    kdes = []
    for g in range(model.G):
        weights = responsibilities[:, g]
        row = list(model.kdes[g])
        if weights.sum() <= 0:
            logger.warning(f"Cluster {g} has no weight; keeping its KDEs")
            kdes.append(row)
            continue
        if guard:
            terms = _cluster_terms(X, row, model.corr[g], evaluation)
            current = _cluster_objective(weights, terms)
        for d in range(model.D):
            candidate = kde_update(X[:, d, :], weights, row[d].bandwidth)
            if not guard:
                row[d] = candidate
                continue
            candidate_terms = _with_feature(X, terms, d, candidate, model.corr[g], evaluation)
            value = _cluster_objective(weights, candidate_terms)
            if value >= current:
                row[d], terms, current = candidate, candidate_terms, value
            else:
                logger.debug(f"KDE update rejected for cluster {g}, feature {d}")
        kdes.append(row)
    return kdes


def m_step_correlation(data, responsibilities: np.ndarray, model: CkmmModel,
                       guard: bool = False) -> List[SpectralCorrelation]:
    """
    Weighted spectral correlation blocks of every cluster under the model's KDEs.

    Clusters with zero total responsibility keep their blocks. With ``guard``
    the new blocks are kept only if they do not lower the cluster's expected
    complete-data log-likelihood.
    """
    X = _as_array(data)
    evaluation = model.config.kde_evaluation
    corr = []
    for g in range(model.G):
        weights = responsibilities[:, g]
        if weights.sum() <= 0:
            corr.append(model.corr[g])
            continue
        terms = _cluster_terms(X, model.kdes[g], model.corr[g] if guard else None, evaluation)
        candidate = estimate_blocks(terms.spectral, weights, ridge=model.config.ridge)
        if guard:
            updated = replace(terms, copula=copula_log_densities(terms.spectral, candidate))
            if _cluster_objective(weights, updated) < _cluster_objective(weights, terms):
                logger.debug(f"Correlation update rejected for cluster {g}")
                candidate = model.corr[g]
        corr.append(candidate)
    return corr


def secant_bandwidth_search(objective: Callable[[float], float], h0: float, lower: float, upper: float,
                            eta: float = 1e-2, delta_h: float = 1e-2, max_substeps: int = 10,
                            tolerance: float = 1e-6, scale: Optional[float] = None) -> BandwidthSearch:
    """
    Secant-style ascent on a bandwidth objective.

    h(i+1) = h(i) + eta * scale^2 * [Q(h(i)) - Q(h(i-1))] / [h(i) - h(i-1)]
    with ``scale`` defaulting to h0, so eta does not depend on the units of h.
    The first step goes to h0 * (1 + delta_h), or downward to
    h0 * (1 - delta_h) when that would pass the upper bound. A step leaving
    [lower, upper] lands on the bound instead; the search stops with
    ``"bounds"`` when it would leave again through the bound it sits on.
    It also stops when |dQ| < tolerance * |Q| or h stops moving, or after
    max_substeps evaluations. The visited bandwidth with the highest
    objective is returned; h0 wins ties.
    """
    scale = h0 if scale is None else scale
    h_prev, q_prev = h0, objective(h0)
    visited = [(h0, q_prev)]
    h_curr = h0 * (1.0 + delta_h)
    if h_curr > upper:
        h_curr = h0 * (1.0 - delta_h)
    h_curr = float(np.clip(h_curr, lower, upper))
    stop_reason = "max_substeps"
    if h_curr == h0:
        stop_reason = "bounds"
    else:
        for _ in range(max_substeps):
            q_curr = objective(h_curr)
            visited.append((h_curr, q_curr))
            if abs(q_curr - q_prev) < tolerance * abs(q_curr):
                stop_reason = "converged"
                break
            h_next = h_curr + eta * scale ** 2 * (q_curr - q_prev) / (h_curr - h_prev)
            if not lower <= h_next <= upper:
                bound = lower if h_next < lower else upper
                if h_curr == bound:
                    stop_reason = "bounds"
                    break
                h_next = bound
            if h_next == h_curr:
                stop_reason = "converged"
                break
            h_prev, q_prev, h_curr = h_curr, q_curr, h_next

    best_h, best_q = visited[0]
    for h, q in visited[1:]:
        if q > best_q:
            best_h, best_q = h, q
    return BandwidthSearch(bandwidth=best_h, objective=best_q, visited=visited, stop_reason=stop_reason)


def _bandwidth_limits(x_d: np.ndarray, reference: float, config: FitConfig) -> Tuple[float, float]:
    low, high = config.bandwidth_bounds
    lower, upper = low * reference, high * reference
    floor = config.min_bandwidth_spread * float(np.ptp(x_d))
    if floor > lower:
        logger.warning(f"Bandwidth floor {floor:.3e} binds above {lower:.3e}")
        lower = min(floor, upper)
    return lower, upper


def _feature_objective(X: np.ndarray, weights: np.ndarray, terms: _ClusterTerms, d: int,
                       corr_g: SpectralCorrelation, evaluation: str):
    """Q of one cluster as a function of feature d's bandwidth, plus the candidates it built."""
    candidates: Dict[float, Tuple[WeightedKde, _ClusterTerms]] = {}

    def objective(h: float) -> float:
        candidate = kde_update(X[:, d, :], weights, h)
        candidate_terms = _with_feature(X, terms, d, candidate, corr_g, evaluation)
        candidates[h] = (candidate, candidate_terms)
        return _cluster_objective(weights, candidate_terms)

    return objective, candidates


def bandwidth_objective(data, responsibilities: np.ndarray, model: CkmmModel, g: int, d: int,
                        config: Optional[FitConfig] = None) -> Tuple[Callable[[float], float], float, float]:
    """
    The objective maximised by the bandwidth search of (cluster g, feature d).

    Returns:
        Tuple of (Q as a function of h with every other parameter held at the
        model's values, lower bound, upper bound)
    """
    X = _as_array(data)
    config = config or model.config
    weights = responsibilities[:, g]
    terms = _cluster_terms(X, model.kdes[g], model.corr[g], config.kde_evaluation)
    objective, _ = _feature_objective(X, weights, terms, d, model.corr[g], config.kde_evaluation)
    lower, upper = _bandwidth_limits(X[:, d, :], model.reference_bandwidths[g, d], config)
    return objective, lower, upper


def _search_feature_bandwidth(X: np.ndarray, weights: np.ndarray, terms: _ClusterTerms, d: int,
                              kde: WeightedKde, corr_g: SpectralCorrelation, reference: float,
                              config: FitConfig) -> Tuple[WeightedKde, _ClusterTerms, float]:
    lower, upper = _bandwidth_limits(X[:, d, :], reference, config)
    h0 = float(np.clip(kde.bandwidth, lower, upper))
    objective, candidates = _feature_objective(X, weights, terms, d, corr_g, config.kde_evaluation)
    search = secant_bandwidth_search(objective, h0, lower, upper, eta=config.eta, delta_h=config.delta_h,
                                     max_substeps=config.max_bandwidth_substeps,
                                     tolerance=config.bandwidth_tolerance, scale=reference)
    best_kde, best_terms = candidates[search.bandwidth]
    logger.debug(f"Bandwidth search feature {d}: {h0:.4g} -> {search.bandwidth:.4g} "
                 f"({len(search.visited)} evaluations, {search.stop_reason})")
    return best_kde, best_terms, search.objective


def m_step_bandwidth(data, responsibilities: np.ndarray, model: CkmmModel,
                     config: Optional[FitConfig] = None) -> CkmmModel:
    """
    Bandwidth search for every (cluster, feature).

    The KDE of each feature is rebuilt from the responsibilities at every
    visited bandwidth; a result is kept only if it does not lower the
    cluster's expected complete-data log-likelihood.

    Returns:
        Model with updated KDEs
    """
    X = _as_array(data)
    config = config or model.config
    kdes = [list(row) for row in model.kdes]
    for g in range(model.G):
        weights = responsibilities[:, g]
        if weights.sum() <= 0:
            continue
        terms = _cluster_terms(X, kdes[g], model.corr[g], config.kde_evaluation)
        current = _cluster_objective(weights, terms)
        for d in range(model.D):
            kde, candidate_terms, value = _search_feature_bandwidth(
                X, weights, terms, d, kdes[g][d], model.corr[g], model.reference_bandwidths[g, d], config)
            if value >= current:
                kdes[g][d], terms, current = kde, candidate_terms, value
    return replace(model, kdes=kdes)


def _gem_m_step(X: np.ndarray, responsibilities: np.ndarray, model: CkmmModel,
                fixed_correlation: bool) -> Tuple[CkmmModel, Tuple[str, ...]]:
    """Guarded KDE, bandwidth and correlation sub-steps followed by the priors."""
    warnings = [f"Cluster {g} received no responsibility; parameters kept"
                for g in range(model.G) if responsibilities[:, g].sum() <= 0]
    model = replace(model, kdes=m_step_kde(X, responsibilities, model, guard=True))
    model = m_step_bandwidth(X, responsibilities, model)
    if not fixed_correlation:
        corr = m_step_correlation(X, responsibilities, model, guard=True)
        for previous, updated in zip(model.corr, corr):
            if updated is not previous:
                warnings.extend(updated.warnings)
        model = replace(model, corr=corr)
    pis, prior_warnings = m_step_priors(responsibilities)
    warnings.extend(prior_warnings)
    return replace(model, pis=pis), tuple(warnings)


def model_from_labels(data, labels: np.ndarray, G: int, config: Optional[FitConfig] = None,
                      fixed_correlation: Optional[SpectralCorrelation] = None) -> CkmmModel:
    """
    Initial model from hard labels: Silverman bandwidths, KDEs, blocks and priors.

    Raises:
        DegenerateClusterError: If a cluster has no subject
    """
    X = _as_array(data)
    config = config or FitConfig()
    labels = np.asarray(labels, dtype=int)
    N, D, T = X.shape
    if labels.shape != (N,) or labels.min() < 0 or labels.max() >= G:
        raise MixtureError(f"Labels must be {N} integers in [0, {G})")
    responsibilities = np.eye(G)[labels]

    reference = np.empty((G, D))
    kdes, corr = [], []
    for g in range(G):
        weights = responsibilities[:, g]
        if weights.sum() <= 0:
            raise DegenerateClusterError(f"Initial cluster {g} is empty")
        row = []
        for d in range(D):
            reference[g, d] = silverman_bandwidth(X[:, d, :], weights)
            row.append(kde_update(X[:, d, :], weights, reference[g, d]))
        kdes.append(row)
        if fixed_correlation is not None:
            corr.append(fixed_correlation)
        else:
            terms = _cluster_terms(X, row, evaluation=config.kde_evaluation)
            corr.append(estimate_blocks(terms.spectral, weights, ridge=config.ridge))
    pis, _ = m_step_priors(responsibilities)
    return CkmmModel(pis=pis, corr=corr, kdes=kdes, reference_bandwidths=reference, config=config)


def _restart_seed(seed_sequence: np.random.SeedSequence) -> int:
    return int(seed_sequence.generate_state(1)[0])


def _kmeans_labels(flat: np.ndarray, G: int, config: FitConfig, seed: int) -> np.ndarray:
    labels = None
    for attempt in range(config.kmeans_reseeds + 1):
        kmeans = KMeans(n_clusters=G, init="k-means++", n_init=1, max_iter=config.kmeans_iterations,
                        random_state=(seed + attempt) % (2 ** 32))
        labels = kmeans.fit_predict(flat)
        if np.all(np.bincount(labels, minlength=G) > 0):
            return labels
        logger.warning(f"K-means produced an empty cluster, reseeding (attempt {attempt + 1})")

    # move the closest non-singleton point to each empty cluster's centre
    distances = kmeans.transform(flat)
    for g in np.flatnonzero(np.bincount(labels, minlength=G) == 0):
        counts = np.bincount(labels, minlength=G)
        movable = np.flatnonzero(counts[labels] > 1)
        chosen = movable[np.argmin(distances[movable, g])]
        labels[chosen] = g
    return labels


def initialize(data, G: int, config: Optional[FitConfig] = None,
               seed: Optional[int] = None) -> Tuple[np.ndarray, CkmmModel]:
    """
    K-means++ initialization on the flattened D*T vectors.

    Args:
        data: (N, D, T) array or LongitudinalDataset
        G: Number of clusters
        config: GEM settings
        seed: K-means seed, defaults to config.seed

    Returns:
        Tuple of (hard labels, initial model)
    """
    X = _as_array(data)
    config = config or FitConfig()
    _validate_cluster_count(X, G)
    if G == 1:
        labels = np.zeros(X.shape[0], dtype=int)
    else:
        labels = _kmeans_labels(X.reshape(X.shape[0], -1), G, config, config.seed if seed is None else seed)
    return labels, model_from_labels(X, labels, G, config)


def _run_gem(X: np.ndarray, model: CkmmModel, restart_index: int,
             fixed_correlation: bool) -> FitResult:
    config = model.config
    trace: List[float] = []
    warnings: List[str] = []
    converged = False
    iterations = 0
    while True:
        responsibilities, loglik = _normalise(_log_joint(X, model))
        trace.append(loglik)
        logger.debug(f"Restart {restart_index} iteration {iterations}: loglik {loglik:.6f}")
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.epsilon * abs(trace[-1]):
            converged = True
            break
        if iterations >= config.max_iterations:
            break
        model, step_warnings = _gem_m_step(X, responsibilities, model, fixed_correlation)
        warnings.extend(w for w in step_warnings if w not in warnings)
        iterations += 1

    if not converged:
        message = f"Restart {restart_index} did not converge in {config.max_iterations} iterations"
        logger.warning(message)
        warnings.append(message)
    return FitResult(model=model, responsibilities=responsibilities,
                     labels=labels_from_responsibilities(responsibilities), loglik_trace=trace,
                     iterations=iterations, converged=converged, restart_index=restart_index,
                     warnings=tuple(warnings))


def _single_restart(X: np.ndarray, G: int, config: FitConfig, restart_index: int, seed: int,
                    fixed_correlation: Optional[SpectralCorrelation]) -> FitResult:
    start_time = time.time()
    if G == 1:
        labels = np.zeros(X.shape[0], dtype=int)
    else:
        labels = _kmeans_labels(X.reshape(X.shape[0], -1), G, config, seed)
    model = model_from_labels(X, labels, G, config, fixed_correlation)
    result = _run_gem(X, model, restart_index, fixed_correlation is not None)
    logger.info(f"Restart {restart_index}: loglik {result.loglik:.4f} after {result.iterations} iterations "
                f"in {time.time() - start_time:.2f}s")
    return result


def fit(data, G: int, config: Optional[FitConfig] = None, initial_labels: Optional[np.ndarray] = None,
        fixed_correlation: Optional[SpectralCorrelation] = None) -> FitResult:
    """
    Fit a G-cluster copula kernel mixture model.

    Runs ``config.restarts`` independent k-means++ initializations (in
    parallel across ``config.threads``) and keeps the run with the highest
    final pseudo log-likelihood; ties go to the lowest restart index.

    Args:
        data: (N, D, T) array or LongitudinalDataset
        G: Number of clusters
        config: GEM settings
        initial_labels: Start a single run from these labels instead of k-means
        fixed_correlation: Keep every cluster's correlation at these blocks

    Returns:
        FitResult of the winning restart

    Raises:
        FitConfigError: If the configuration or G is invalid
        MixtureError: If every restart fails
    """
    X = _as_array(data)
    config = config or FitConfig()
    config.validate()
    _validate_cluster_count(X, G)
    if fixed_correlation is not None and (fixed_correlation.T, fixed_correlation.D) != (X.shape[2], X.shape[1]):
        raise FitConfigError("Fixed correlation dimensions do not match the data")
    logger.info(f"Fitting G={G} on N={X.shape[0]}, D={X.shape[1]}, T={X.shape[2]} "
                f"with {config.restarts} restarts")

    if initial_labels is not None:
        model = model_from_labels(X, initial_labels, G, config, fixed_correlation)
        return _run_gem(X, model, 0, fixed_correlation is not None)

    seeds = [_restart_seed(s) for s in np.random.SeedSequence(config.seed).spawn(config.restarts)]
    results: List[Optional[FitResult]] = [None] * config.restarts
    failures = []
    with ThreadPoolExecutor(max_workers=config.threads) as executor:
        futures = [executor.submit(_single_restart, X, G, config, i, seeds[i], fixed_correlation)
                   for i in range(config.restarts)]
        for i, future in enumerate(futures):
            try:
                results[i] = future.result(timeout=RESTART_TIMEOUT)
            except CkmmError as e:
                logger.error(f"Restart {i} failed: {e}")
                failures.append(f"restart {i}: {e}")

    best = None
    for result in results:
        if result is not None and (best is None or result.loglik > best.loglik):
            best = result
    if best is None:
        raise MixtureError(f"All restarts failed: {'; '.join(failures)}")
    logger.info(f"Selected restart {best.restart_index} with loglik {best.loglik:.4f}")
    return best


def predict(data, model: CkmmModel) -> Tuple[np.ndarray, np.ndarray]:
    """Responsibilities and labels of (possibly new) subjects under a fitted model."""
    X = _as_array(data)
    if X.shape[1:] != (model.D, model.T):
        raise MixtureError(f"Data has D={X.shape[1]}, T={X.shape[2]}; model expects D={model.D}, T={model.T}")
    responsibilities, _ = _normalise(_log_joint(X, model))
    return responsibilities, labels_from_responsibilities(responsibilities)


def effective_parameters(model: CkmmModel) -> float:
    """(G-1) + G*T*D(D+1)/2 + sum of KDE smoother traces."""
    G, D, T = model.G, model.D, model.T
    traces = sum(smoother_trace(kde) for row in model.kdes for kde in row)
    return (G - 1) + G * T * D * (D + 1) / 2 + traces


def adjusted_bic(fit_result: FitResult, data) -> float:
    """-2 loglik + m_eff log N; lower is better."""
    N = _as_array(data).shape[0]
    return -2.0 * fit_result.loglik + effective_parameters(fit_result.model) * np.log(N)


def nec(fits: Dict[int, FitResult], one_cluster_special: Optional[FitResult] = None) -> NecResult:
    """
    Normalized entropy criterion NEC(G) = E(G) / (L(G) - L(1)).

    ``fits`` must contain G=1 (for L(1)) and any G >= 2. The G=1 reference
    value comes from ``one_cluster_special``: a multi-cluster fit with every
    correlation fixed to the single-cluster sample correlation; without it,
    or when it is undefined, NEC(1) = 1. The best G >= 2 is kept only if its
    NEC is below the G=1 value.
    """
    if 1 not in fits:
        raise MixtureError("NEC needs the G=1 fit")
    base = fits[1].loglik
    warnings = []

    def value(label: str, result: FitResult) -> Optional[float]:
        gain = result.loglik - base
        if gain <= 0:
            message = f"NEC undefined for {label}: log-likelihood {result.loglik:.4f} does not exceed L(1)"
            logger.warning(message)
            warnings.append(message)
            return None
        return entropy(result.responsibilities) / gain

    values = {}
    for G in sorted(fits):
        if G >= 2:
            computed = value(f"G={G}", fits[G])
            if computed is not None:
                values[G] = computed

    nec_one = 1.0
    if one_cluster_special is not None:
        computed = value("the G=1 reference", one_cluster_special)
        if computed is not None:
            nec_one = computed

    best_multi = min(values, key=lambda G: (values[G], G)) if values else None
    selected = best_multi if best_multi is not None and values[best_multi] < nec_one else 1
    return NecResult(values=values, nec_one=nec_one, best_multi=best_multi, selected=selected,
                     warnings=tuple(warnings))
