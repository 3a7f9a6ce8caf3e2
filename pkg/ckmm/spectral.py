"""
Frequency-domain representation of block-circulant correlation matrices.

A flattened observation q has length D*T and is feature-major:
q[d*T + t] is feature d at time t. Applying the unitary DFT per feature and
reordering by frequency turns a block-circulant correlation matrix into T
independent D x D Hermitian blocks, one per frequency.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .errors import CkmmError

# Configure logging
logger = logging.getLogger(__name__)

# Tolerances for structural checks on spectral blocks
HERMITIAN_TOLERANCE = 1e-10
CONJUGATE_SYMMETRY_TOLERANCE = 1e-8
IMAGINARY_RESIDUE_TOLERANCE = 1e-8


class SpectralError(CkmmError):
    """Base exception for spectral operations."""
    code = "SPECTRAL_ERROR"


class InvalidDimensionError(SpectralError):
    """Raised when T or D is not a positive integer or shapes disagree."""
    code = "INVALID_DIMENSION"


class InvalidInputError(SpectralError):
    """Raised when an input vector has the wrong length or is not finite."""
    code = "INVALID_INPUT"


class InconsistentBlocksError(SpectralError):
    """Raised when spectral blocks violate conjugate symmetry."""
    code = "INCONSISTENT_BLOCKS"


@dataclass(frozen=True, eq=False)
class DftBasis:
    """Unitary DFT basis W[t, m] = exp(2 pi i t m / T) / sqrt(T)."""
    T: int
    W: np.ndarray


@dataclass(frozen=True, eq=False)
class PermutationIndex:
    """
    Frequency-major reordering of a feature-major spectral vector.

    ``forward[m*D + n] = T*n + m``: position m*D + n of the permuted vector
    holds feature n at frequency m.
    """
    T: int
    D: int
    forward: np.ndarray
    inverse: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Reorder a feature-major vector to frequency-major."""
        return np.asarray(z)[..., self.forward]

    def invert(self, y: np.ndarray) -> np.ndarray:
        """Reorder a frequency-major vector back to feature-major."""
        return np.asarray(y)[..., self.inverse]


@dataclass(frozen=True, eq=False)
class SpectralVector:
    """T chunks of D complex values; ``blocks[j, d]`` is feature d at frequency j."""
    blocks: np.ndarray

    @property
    def T(self) -> int:
        return self.blocks.shape[0]

    @property
    def D(self) -> int:
        return self.blocks.shape[1]


@dataclass(frozen=True, eq=False)
class SpectralCorrelation:
    """
    Per-frequency D x D Hermitian blocks of a block-circulant correlation matrix.

    ``blocks`` has shape (T, D, D). ``ridge`` is added to every block diagonal
    whenever the blocks are factorised or assembled. ``warnings`` carries
    non-fatal diagnostics from estimation (ill-conditioned clusters).
    """
    blocks: np.ndarray
    ridge: float = 0.0
    warnings: tuple = ()

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.complex128)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2] or blocks.shape[0] < 1:
            raise InvalidDimensionError(f"Spectral blocks must have shape (T, D, D), got {blocks.shape}")
        if not np.all(np.isfinite(blocks)):
            raise InvalidInputError("Spectral blocks must be finite")
        if self.ridge < 0:
            raise InvalidInputError(f"Ridge must be non-negative, got {self.ridge}")

        scale = max(1.0, float(np.max(np.abs(blocks))))
        asymmetry = np.max(np.abs(blocks - np.conj(np.swapaxes(blocks, 1, 2))))
        if asymmetry > HERMITIAN_TOLERANCE * scale:
            raise InconsistentBlocksError(f"Spectral blocks are not Hermitian (max deviation {asymmetry:.3e})")
        object.__setattr__(self, "blocks", blocks)

    @property
    def T(self) -> int:
        return self.blocks.shape[0]

    @property
    def D(self) -> int:
        return self.blocks.shape[1]

    def time_domain_diagonal(self) -> np.ndarray:
        """Diagonal of the assembled matrix per feature: (1/T) sum_j Re C_j[d, d] + ridge."""
        return np.real(np.einsum("jdd->d", self.blocks)) / self.T + self.ridge

    def conjugate_symmetry_gap(self) -> float:
        """Largest |C_{T-j} - conj(C_j)| over all frequencies."""
        mirrored = self.blocks[(-np.arange(self.T)) % self.T]
        return float(np.max(np.abs(mirrored - np.conj(self.blocks))))

    @classmethod
    def identity(cls, T: int, D: int) -> "SpectralCorrelation":
        """Blocks of the identity correlation (independent white noise)."""
        _validate_dimensions(T, D)
        return cls(blocks=np.broadcast_to(np.eye(D, dtype=np.complex128), (T, D, D)).copy())


def _validate_dimensions(T: int, D: int = 1) -> None:
    """
    Validate time and feature dimensions.

    Raises:
        InvalidDimensionError: If T or D is not a positive integer
    """
    errors = []
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        errors.append(f"T must be a positive integer, got {T!r}")
    if not isinstance(D, (int, np.integer)) or isinstance(D, bool) or D < 1:
        errors.append(f"D must be a positive integer, got {D!r}")
    if errors:
        raise InvalidDimensionError("; ".join(errors))


@lru_cache(maxsize=32)
def _dft_matrix(T: int) -> np.ndarray:
    t = np.arange(T)
    W = np.exp(2j * np.pi * np.outer(t, t) / T) / np.sqrt(T)
    W.setflags(write=False)
    return W


def dft_basis(T: int) -> DftBasis:
    """
    Build the unitary DFT basis of size T.

    Args:
        T: Number of time points

    Returns:
        DftBasis with W[t, m] = exp(2 pi i t m / T) / sqrt(T)

    Raises:
        InvalidDimensionError: If T < 1
    """
    _validate_dimensions(T)
    return DftBasis(T=int(T), W=_dft_matrix(int(T)))


def permutation_index(T: int, D: int) -> PermutationIndex:
    """
    Build the frequency-major permutation for T time points and D features.

    Raises:
        InvalidDimensionError: If T < 1 or D < 1
    """
    _validate_dimensions(T, D)
    m, n = np.divmod(np.arange(T * D), D)
    forward = T * n + m
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(T * D)
    return PermutationIndex(T=int(T), D=int(D), forward=forward, inverse=inverse)


def spectralize_batch(Q: np.ndarray, T: int, D: int) -> np.ndarray:
    """
    Spectralize many flattened observations at once.

    Args:
        Q: Array of shape (N, D*T), feature-major rows
        T: Number of time points
        D: Number of features

    Returns:
        Complex array of shape (N, T, D)

    Raises:
        InvalidDimensionError: If T or D is invalid
        InvalidInputError: If Q has the wrong width or contains non-finite values
    """
    _validate_dimensions(T, D)
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != D * T:
        raise InvalidInputError(f"Expected observations of length {D * T}, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InvalidInputError("Observations must be finite")
    W_h = np.conj(dft_basis(T).W)
    # blocks[n, j, d] = sum_t conj(W)[t, j] q[n, d, t]
    return np.einsum("ndt,tj->njd", Q.reshape(-1, D, T), W_h)


def spectralize(q: np.ndarray, T: int, D: int) -> SpectralVector:
    """
    Map a feature-major vector to its frequency-major spectral chunks.

    blocks[j][d] = (1/sqrt(T)) sum_t q[d*T + t] exp(-2 pi i j t / T).

    Args:
        q: Real vector of length D*T
        T: Number of time points
        D: Number of features

    Returns:
        SpectralVector with blocks of shape (T, D)
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise InvalidInputError(f"Expected a 1-D vector, got shape {q.shape}")
    return SpectralVector(blocks=spectralize_batch(q[None, :], T, D)[0])


def inverse_spectralize(v: SpectralVector) -> np.ndarray:
    """Recover the real feature-major vector from its spectral chunks."""
    T, D = v.T, v.D
    W = dft_basis(T).W
    q = np.einsum("tj,jd->dt", W, v.blocks)
    return np.real(q).reshape(D * T)


def circulant_eigenvalues(acf: Mapping[int, float], T: int) -> np.ndarray:
    """
    Eigenvalues of the circulant approximation of a Toeplitz block.

    lambda(m) = sum_k r(k) exp(2 pi i m k / T) over lags k in [-(T-1), T-1];
    lags missing from ``acf`` are zero.

    Args:
        acf: Mapping from lag to (cross-)correlation r(k)
        T: Number of time points

    Returns:
        Complex array of length T

    Raises:
        InvalidDimensionError: If T < 1 or a lag lies outside [-(T-1), T-1]
    """
    _validate_dimensions(T)
    lags = np.array(list(acf.keys()), dtype=int)
    values = np.array([float(acf[k]) for k in acf.keys()], dtype=float)
    if lags.size and np.max(np.abs(lags)) > T - 1:
        raise InvalidDimensionError(f"Lags must lie in [-{T - 1}, {T - 1}], got {sorted(acf.keys())}")
    m = np.arange(T)
    return np.exp(2j * np.pi * np.outer(m, lags) / T) @ values


def toeplitz_to_spectral_blocks(R: np.ndarray, T: int, D: int) -> SpectralCorrelation:
    """
    Spectral blocks of the circulant approximation of a Toeplitz-block matrix.

    Each D x D block pair (i, j) of R is read through its first row and
    column, r_ij(k) = R_ij[0, k] and r_ij(-k) = R_ij[k, 0].

    Args:
        R: Real (D*T, D*T) matrix, feature-major, with Toeplitz blocks
        T: Number of time points
        D: Number of features
    """
    _validate_dimensions(T, D)
    R = np.asarray(R, dtype=float)
    if R.shape != (D * T, D * T):
        raise InvalidDimensionError(f"Expected a {D * T} x {D * T} matrix, got {R.shape}")
    blocks = np.empty((T, D, D), dtype=np.complex128)
    for i in range(D):
        for j in range(D):
            block = R[i * T:(i + 1) * T, j * T:(j + 1) * T]
            acf = {k: block[0, k] for k in range(T)}
            acf.update({-k: block[k, 0] for k in range(1, T)})
            blocks[:, i, j] = circulant_eigenvalues(acf, T)
    blocks = 0.5 * (blocks + np.conj(np.swapaxes(blocks, 1, 2)))
    return SpectralCorrelation(blocks=blocks)


def assemble_full_correlation(corr: SpectralCorrelation) -> np.ndarray:
    """
    Reconstruct the dense (D*T, D*T) block-circulant correlation matrix.

    Intended for diagnostics and tests. The ridge is included on the diagonal.

    Raises:
        InconsistentBlocksError: If C_{T-j} differs from conj(C_j) by more than 1e-8
    """
    T, D = corr.T, corr.D
    gap = corr.conjugate_symmetry_gap()
    if gap > CONJUGATE_SYMMETRY_TOLERANCE:
        raise InconsistentBlocksError(f"Blocks violate conjugate symmetry (max gap {gap:.3e})")
    W = dft_basis(T).W
    # R[i, t, j, s] = sum_m W[t, m] C_m[i, j] conj(W[s, m])
    dense = np.einsum("tm,mij,sm->itjs", W, corr.blocks, np.conj(W)).reshape(D * T, D * T)
    if np.max(np.abs(dense.imag)) > IMAGINARY_RESIDUE_TOLERANCE * max(1.0, np.max(np.abs(dense.real))):
        raise InconsistentBlocksError("Assembled correlation has a non-negligible imaginary part")
    return dense.real + corr.ridge * np.eye(D * T)
