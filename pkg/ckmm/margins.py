"""
Marginal distributions: weighted Gaussian kernel density estimates, their
smoothed log-density, Silverman bandwidths and parametric margins used by the
simulation study.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import special, stats
from scipy.integrate import cumulative_trapezoid

from .errors import CkmmError

# Configure logging
logger = logging.getLogger(__name__)

# CDF values are clipped into [CDF_CLIP, 1 - CDF_CLIP] before the normal quantile
CDF_CLIP = 1e-10

# Gauss-Hermite nodes for the smoothed log-density
QUADRATURE_NODES = 20
HERMITE_NODES, HERMITE_WEIGHTS = hermgauss(QUADRATURE_NODES)

# Silverman rule
SILVERMAN_FACTOR = 0.9
IQR_SCALE = 1.34
DEGENERATE_BANDWIDTH_SCALE = 1e-3

# Binned grid evaluator, selected with kde_evaluation="binned"
KERNEL_SUPPORT = 12.0
GRID_POINTS_PER_BANDWIDTH = 8
MAX_GRID_SIZE = 2 ** 16
PDF_FLOOR = 1e-300

# Exact evaluation works on chunks of at most this many kernel terms
_CHUNK_ELEMENTS = 2 ** 22
SQRT_TWO_PI = np.sqrt(2.0 * np.pi)


class MarginError(CkmmError):
    """Base exception for margin estimation."""
    code = "MARGIN_ERROR"


class DegenerateClusterError(MarginError):
    """Raised when a cluster has no positive weight."""
    code = "DEGENERATE_CLUSTER"


class MarginDomainError(MarginError):
    """Raised when a probability or parameter lies outside its domain."""
    code = "DOMAIN_ERROR"


@dataclass(frozen=True)
class MarginSpec:
    """
    Parametric margin.

    ``family`` is ``"normal"`` (``mean``, ``variance``) or ``"student_t"``
    (``df``, standard location and scale).
    """
    family: str
    mean: float = 0.0
    variance: float = 1.0
    df: float = float("inf")

    def __post_init__(self):
        if self.family not in ("normal", "student_t"):
            raise MarginDomainError(f"Unknown margin family: {self.family!r}")
        if self.family == "normal" and not self.variance > 0:
            raise MarginDomainError(f"Normal margin needs a positive variance, got {self.variance}")
        if self.family == "student_t" and not self.df > 2:
            raise MarginDomainError(f"Student t margin needs df > 2 for a finite variance, got {self.df}")

    @property
    def location(self) -> float:
        return self.mean if self.family == "normal" else 0.0

    @property
    def scale(self) -> float:
        """Standard deviation."""
        if self.family == "normal":
            return float(np.sqrt(self.variance))
        return float(np.sqrt(self.df / (self.df - 2.0)))

    def to_dict(self) -> dict:
        if self.family == "normal":
            return {"family": "normal", "mean": self.mean, "variance": self.variance}
        return {"family": "student_t", "df": self.df}

    @classmethod
    def from_dict(cls, data: dict) -> "MarginSpec":
        return cls(**data)


@dataclass
class KdeGrid:
    """
    Dense-grid approximation of a WeightedKde for large fits.

    The weighted points are linearly binned onto a regular grid and convolved
    with the Gaussian kernel truncated at KERNEL_SUPPORT bandwidths. The CDF is
    the normalised cumulative trapezoid of the gridded density.
    """
    grid: np.ndarray
    pdf: np.ndarray
    log_pdf: np.ndarray
    cdf: np.ndarray
    bandwidth: float

    def cdf_at(self, x: np.ndarray) -> np.ndarray:
        values = np.interp(x, self.grid, self.cdf)
        return np.clip(values, CDF_CLIP, 1.0 - CDF_CLIP)

    def pdf_at(self, x: np.ndarray) -> np.ndarray:
        return np.interp(x, self.grid, self.pdf)

    def smoothed_log_density_at(self, x: np.ndarray) -> np.ndarray:
        """Gauss-Hermite approximation of int K_h(x, u) log f(u) du at each x."""
        nodes, weights = HERMITE_NODES, HERMITE_WEIGHTS
        x = np.asarray(x, dtype=float)
        u = x[..., None] + np.sqrt(2.0) * self.bandwidth * nodes
        return np.interp(u, self.grid, self.log_pdf) @ weights / np.sqrt(np.pi)


@dataclass(frozen=True, eq=False)
class WeightedKde:
    """
    Weighted Gaussian KDE of one feature within one cluster.

    ``points`` has shape (N, T) (every subject's series for the feature),
    ``weights`` has length N. Each point of subject n carries mass
    weights[n] / (T * sum(weights)).
    """
    points: np.ndarray
    weights: np.ndarray
    bandwidth: float

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        errors = []
        if points.ndim != 2 or points.size == 0:
            errors.append(f"points must be a non-empty (N, T) array, got shape {points.shape}")
        elif weights.shape != (points.shape[0],):
            errors.append(f"weights must have length {points.shape[0]}, got shape {weights.shape}")
        if not np.all(np.isfinite(points)):
            errors.append("points must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            errors.append("weights must be finite and non-negative")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            errors.append(f"bandwidth must be positive, got {self.bandwidth}")
        if errors:
            raise MarginError("Invalid KDE: " + "; ".join(errors))
        if weights.sum() <= 0:
            raise DegenerateClusterError("All KDE weights are zero")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def T(self) -> int:
        return self.points.shape[1]

    @cached_property
    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1)

    @cached_property
    def point_weights(self) -> np.ndarray:
        """Normalised mass of every flattened point (sums to 1)."""
        per_point = np.repeat(self.weights, self.T)
        return per_point / per_point.sum()

    @cached_property
    def active_points(self) -> np.ndarray:
        return self.flat_points[self.point_weights > 0]

    @cached_property
    def active_weights(self) -> np.ndarray:
        return self.point_weights[self.point_weights > 0]

    @cached_property
    def grid(self) -> KdeGrid:
        return _build_grid(self)


def _build_grid(kde: WeightedKde) -> KdeGrid:
    h = kde.bandwidth
    x = kde.flat_points
    w = kde.point_weights
    lo = x.min() - KERNEL_SUPPORT * h
    hi = x.max() + KERNEL_SUPPORT * h
    step = max(h / GRID_POINTS_PER_BANDWIDTH, (hi - lo) / (MAX_GRID_SIZE - 1))
    size = int(np.ceil((hi - lo) / step)) + 1
    grid = lo + step * np.arange(size)

    position = (x - lo) / step
    left = np.clip(np.floor(position).astype(int), 0, size - 2)
    frac = position - left
    mass = (np.bincount(left, weights=w * (1.0 - frac), minlength=size)
            + np.bincount(left + 1, weights=w * frac, minlength=size))

    half = int(np.ceil(KERNEL_SUPPORT * h / step))
    offsets = np.arange(-half, half + 1) * step
    kernel = stats.norm.pdf(offsets / h) / h
    pdf = np.convolve(mass, kernel, mode="same")
    if pdf.size != size:
        # kernel wider than the grid; centre the full convolution
        full = np.convolve(mass, kernel, mode="full")
        pdf = full[half:half + size]
    pdf = np.maximum(pdf, PDF_FLOOR)

    cdf = cumulative_trapezoid(pdf, grid, initial=0.0)
    cdf /= cdf[-1]
    return KdeGrid(grid=grid, pdf=pdf, log_pdf=np.log(pdf), cdf=cdf, bandwidth=h)


def kde_update(points: np.ndarray, weights: np.ndarray, bandwidth: float) -> WeightedKde:
    """
    Build the weighted KDE of one feature for one cluster.

    Args:
        points: (N, T) observations of the feature
        weights: Length-N non-negative subject weights (responsibilities)
        bandwidth: Kernel bandwidth h > 0

    Returns:
        WeightedKde

    Raises:
        DegenerateClusterError: If every weight is zero
        MarginError: If the inputs are malformed
    """
    return WeightedKde(points=points, weights=weights, bandwidth=bandwidth)


def _exact_sum(kde: WeightedKde, u: np.ndarray, kernel) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    flat = u.reshape(-1)
    out = np.empty_like(flat)
    x, w, h = kde.active_points, kde.active_weights, kde.bandwidth
    chunk_size = max(1, _CHUNK_ELEMENTS // x.size)
    for start in range(0, flat.size, chunk_size):
        chunk = flat[start:start + chunk_size]
        out[start:start + chunk_size] = kernel((chunk[:, None] - x[None, :]) / h) @ w
    return out.reshape(u.shape)


def _gaussian(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / SQRT_TWO_PI


def kde_pdf(kde: WeightedKde, u: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Weighted kernel density sum_i w_i phi((u - x_i) / h) / h."""
    result = _exact_sum(kde, u, _gaussian) / kde.bandwidth
    return float(result) if np.ndim(result) == 0 else result


def kde_cdf(kde: WeightedKde, u: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Weighted kernel CDF, clipped into [1e-10, 1 - 1e-10]."""
    result = np.clip(_exact_sum(kde, u, special.ndtr), CDF_CLIP, 1.0 - CDF_CLIP)
    return float(result) if np.ndim(result) == 0 else result


def smoothed_log_density(kde: WeightedKde, x: Union[float, np.ndarray],
                         h_query: float) -> Union[float, np.ndarray]:
    """
    Smoothed log-density int K_h(x, u) log f(u) du by 20-point Gauss-Hermite.

    Args:
        kde: Estimated density f
        x: Query point(s)
        h_query: Smoothing bandwidth of the outer kernel
    """
    if not h_query > 0:
        raise MarginDomainError(f"h_query must be positive, got {h_query}")
    nodes, weights = HERMITE_NODES, HERMITE_WEIGHTS
    x = np.asarray(x, dtype=float)
    u = x[..., None] + np.sqrt(2.0) * h_query * nodes
    log_f = np.log(np.maximum(kde_pdf(kde, u), PDF_FLOOR))
    result = log_f @ weights / np.sqrt(np.pi)
    return float(result) if np.ndim(result) == 0 else result


def normal_quantile(p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Standard normal quantile.

    Raises:
        MarginDomainError: If any p lies outside the open interval (0, 1)
    """
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise MarginDomainError("Normal quantile requires probabilities strictly inside (0, 1)")
    result = special.ndtri(arr)
    return float(result) if np.ndim(result) == 0 else result


def margin_quantile(spec: MarginSpec, p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Quantile of a parametric margin.

    Student t quantiles invert the regularised incomplete beta CDF
    (scipy.special.stdtrit).
    """
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise MarginDomainError("Margin quantile requires probabilities strictly inside (0, 1)")
    if spec.family == "normal":
        result = spec.mean + np.sqrt(spec.variance) * special.ndtri(arr)
    else:
        result = special.stdtrit(spec.df, arr)
    return float(result) if np.ndim(result) == 0 else result


def margin_cdf(spec: MarginSpec, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """CDF of a parametric margin."""
    if spec.family == "normal":
        result = special.ndtr((np.asarray(x, dtype=float) - spec.mean) / np.sqrt(spec.variance))
    else:
        result = special.stdtr(spec.df, np.asarray(x, dtype=float))
    return float(result) if np.ndim(result) == 0 else result


def margin_pdf(spec: MarginSpec, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Density of a parametric margin."""
    if spec.family == "normal":
        result = stats.norm.pdf(x, loc=spec.mean, scale=np.sqrt(spec.variance))
    else:
        result = stats.t.pdf(x, df=spec.df)
    return float(result) if np.ndim(result) == 0 else result


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    positions = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(q, positions, v)


def silverman_bandwidth(data: np.ndarray, weights: np.ndarray) -> float:
    """
    Weighted Silverman rule h0 = 0.9 * min(sigma, IQR / 1.34) * n_eff^(-1/5).

    Args:
        data: (N, T) series with length-N subject weights, or a flat array
            with one weight per value
        weights: Non-negative weights

    Returns:
        Bandwidth, floored at 1e-3 * (1 + |mean|) when the data has no spread

    Raises:
        DegenerateClusterError: If every weight is zero
    """
    data = np.asarray(data, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if data.ndim == 2:
        if weights.shape != (data.shape[0],):
            raise MarginError(f"Expected {data.shape[0]} subject weights, got shape {weights.shape}")
        weights = np.repeat(weights, data.shape[1])
        data = data.reshape(-1)
    if data.shape != weights.shape:
        raise MarginError(f"Data and weights disagree: {data.shape} vs {weights.shape}")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise DegenerateClusterError("Silverman bandwidth needs positive total weight")

    w = weights / weights.sum()
    mean = float(w @ data)
    sigma = float(np.sqrt(w @ (data - mean) ** 2))
    q25, q75 = _weighted_quantile(data, w, np.array([0.25, 0.75]))
    iqr = float(q75 - q25)
    spread = min(sigma, iqr / IQR_SCALE) if iqr > 0 else sigma
    n_eff = 1.0 / float(np.sum(w ** 2))
    floor = DEGENERATE_BANDWIDTH_SCALE * (1.0 + abs(mean))
    if spread <= 0:
        logger.debug(f"Zero spread in bandwidth data, using floor {floor:.3e}")
        return floor
    return max(SILVERMAN_FACTOR * spread * n_eff ** -0.2, floor)


def smoother_trace(kde: WeightedKde) -> float:
    """
    Effective number of parameters of the KDE smoother.

    sum_i w_i K_h(x_i, x_i) / sum_j w_j K_h(x_j, x_i) over points with
    positive weight; tends to 1 for very large h and to the number of
    distinct points as h goes to 0.
    """
    x, w = kde.active_points, kde.active_weights
    density = np.maximum(kde_pdf(kde, x), PDF_FLOOR)
    return float(np.sum(w * stats.norm.pdf(0.0) / kde.bandwidth / density))
