"""
Gaussian copula log-density in the frequency domain and the weighted
estimator of per-frequency correlation blocks.
"""

import logging
from typing import Tuple

import numpy as np

from .errors import CkmmError
from .spectral import (
    IMAGINARY_RESIDUE_TOLERANCE,
    InvalidInputError,
    SpectralCorrelation,
    SpectralVector,
)

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-8

# Total weight below which a cluster is reported as ill-conditioned
ILL_CONDITIONED_WEIGHT = 1.0


class CopulaError(CkmmError):
    """Base exception for copula computations."""
    code = "COPULA_ERROR"


class SingularCorrelationError(CopulaError):
    """Raised when a spectral block is not positive definite after the ridge."""
    code = "SINGULAR_CORRELATION"

    def __init__(self, frequency: int, message: str = ""):
        self.frequency = frequency
        super().__init__(message or f"Spectral block at frequency {frequency} is not positive definite")


def _factorise(corr: SpectralCorrelation) -> Tuple[float, np.ndarray]:
    """
    Log-determinant sum and C_j^{-1} - I for every block.

    Raises:
        SingularCorrelationError: Naming the first failing frequency
    """
    cached = corr.__dict__.get("_factors")
    if cached is not None:
        return cached

    D = corr.D
    identity = np.eye(D)
    blocks = corr.blocks + corr.ridge * identity
    logdet = 0.0
    inverse = np.empty_like(blocks)
    for j in range(corr.T):
        try:
            chol = np.linalg.cholesky(blocks[j])
        except np.linalg.LinAlgError:
            raise SingularCorrelationError(j)
        logdet += 2.0 * float(np.sum(np.log(np.real(np.diag(chol)))))
        chol_inv = np.linalg.inv(chol)
        inverse[j] = np.conj(chol_inv.T) @ chol_inv
    factors = (logdet, inverse - identity)
    # frozen dataclass; cache next to cached_property values
    corr.__dict__["_factors"] = factors
    return factors


def copula_log_densities(V: np.ndarray, corr: SpectralCorrelation) -> np.ndarray:
    """
    Gaussian copula log-density of many spectral vectors.

    Args:
        V: Complex array of shape (N, T, D)
        corr: Spectral correlation with matching T and D

    Returns:
        Length-N array of sum_j [-1/2 log det C_j - 1/2 v_j^H (C_j^{-1} - I) v_j]

    Raises:
        InvalidInputError: If shapes disagree
        SingularCorrelationError: If a block is not positive definite
        CopulaError: If the quadratic form has a non-negligible imaginary part
    """
    V = np.asarray(V)
    if V.ndim != 3 or V.shape[1:] != (corr.T, corr.D):
        raise InvalidInputError(f"Expected spectral vectors of shape (N, {corr.T}, {corr.D}), got {V.shape}")
    logdet, precision_minus_identity = _factorise(corr)
    quad = np.einsum("njd,jde,nje->n", np.conj(V), precision_minus_identity, V)
    residue = np.max(np.abs(quad.imag), initial=0.0)
    if residue > IMAGINARY_RESIDUE_TOLERANCE * max(1.0, float(np.max(np.abs(quad.real), initial=0.0))):
        raise CopulaError(f"Copula quadratic form has imaginary residue {residue:.3e}")
    return -0.5 * logdet - 0.5 * quad.real


def copula_log_density(v: SpectralVector, corr: SpectralCorrelation) -> float:
    """
    Gaussian copula log-density of one spectral vector.

    Args:
        v: Spectral chunks of the normal scores of one subject
        corr: Spectral correlation blocks

    Returns:
        Copula log-density (zero for identity blocks)
    """
    return float(copula_log_densities(v.blocks[None, ...], corr)[0])


def estimate_blocks(V: np.ndarray, weights: np.ndarray, ridge: float = DEFAULT_RIDGE,
                    normalize: bool = True) -> SpectralCorrelation:
    """
    Weighted estimate of per-frequency correlation blocks.

    C_j = sum_n w_n v_nj v_nj^H / sum_n w_n, computed for j = 0..T//2 and
    mirrored as C_{T-j} = conj(C_j). Blocks are made exactly Hermitian and,
    when ``normalize`` is set, rescaled by s_d = 1 / sqrt((1/T) sum_j C_j[d, d])
    so the time-domain diagonal is one.

    Args:
        V: Complex array of shape (N, T, D)
        weights: Length-N non-negative weights
        ridge: Added to every block diagonal at inversion
        normalize: Apply the unit-diagonal rescaling

    Returns:
        SpectralCorrelation; its ``warnings`` flag clusters with total weight below 1

    Raises:
        InvalidInputError: If shapes disagree or weights are invalid
    """
    V = np.asarray(V, dtype=np.complex128)
    weights = np.asarray(weights, dtype=float)
    if V.ndim != 3:
        raise InvalidInputError(f"Expected spectral vectors of shape (N, T, D), got {V.shape}")
    N, T, D = V.shape
    if weights.shape != (N,):
        raise InvalidInputError(f"Expected {N} weights, got shape {weights.shape}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)) or weights.sum() <= 0:
        raise InvalidInputError("Weights must be non-negative, finite and not all zero")

    total = float(weights.sum())
    warnings = ()
    if total < ILL_CONDITIONED_WEIGHT:
        message = f"Ill-conditioned cluster: total weight {total:.3e} below {ILL_CONDITIONED_WEIGHT}"
        logger.warning(message)
        warnings = (message,)

    half = T // 2 + 1
    blocks = np.empty((T, D, D), dtype=np.complex128)
    blocks[:half] = np.einsum("n,njd,nje->jde", weights, V[:, :half], np.conj(V[:, :half])) / total
    blocks[half:] = np.conj(blocks[T - np.arange(half, T)])
    blocks = 0.5 * (blocks + np.conj(np.swapaxes(blocks, 1, 2)))
    # real input makes the zero (and Nyquist) frequency real
    blocks[0] = blocks[0].real
    if T % 2 == 0:
        blocks[T // 2] = blocks[T // 2].real

    if normalize:
        diagonal = np.real(np.einsum("jdd->d", blocks)) / T
        scale = 1.0 / np.sqrt(np.maximum(diagonal, ridge if ridge > 0 else np.finfo(float).tiny))
        blocks = blocks * scale[None, :, None] * scale[None, None, :]
        deviation = float(np.max(np.abs(diagonal - 1.0)))
        logger.debug(f"Rescaled spectral blocks to unit diagonal (max deviation {deviation:.3e})")

    return SpectralCorrelation(blocks=blocks, ridge=ridge, warnings=warnings)
