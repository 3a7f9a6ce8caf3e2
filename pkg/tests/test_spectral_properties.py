"""
Property-based tests for the frequency-domain transforms.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckmm.spectral import (
    InconsistentBlocksError,
    InvalidDimensionError,
    InvalidInputError,
    SpectralCorrelation,
    assemble_full_correlation,
    circulant_eigenvalues,
    dft_basis,
    inverse_spectralize,
    permutation_index,
    spectralize,
    spectralize_batch,
    toeplitz_to_spectral_blocks,
)
from tests.conftest import random_spectral_blocks


def dense_spectral_transform(q, T, D):
    """P * blockdiag(W^H) * q built from explicit matrices."""
    W = dft_basis(T).W
    block_diag = np.kron(np.eye(D), np.conj(W).T)
    P = np.zeros((D * T, D * T))
    for m in range(T):
        for n in range(D):
            P[m * D + n, T * n + m] = 1.0
    return (P @ block_diag @ q).reshape(T, D)


def circulant(first_row):
    T = len(first_row)
    return np.array([[first_row[(t - s) % T] for t in range(T)] for s in range(T)])


series_shapes = st.tuples(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=3))


class TestDftBasis:
    """Test the unitary DFT basis."""

    def test_single_point_basis(self):
        assert np.allclose(dft_basis(1).W, [[1.0]])

    def test_two_point_basis(self):
        expected = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
        assert np.allclose(dft_basis(2).W, expected, atol=1e-15)

    @pytest.mark.parametrize("T", [4, 7, 16])
    def test_basis_is_unitary(self, T):
        W = dft_basis(T).W
        assert np.max(np.abs(W @ np.conj(W.T) - np.eye(T))) < 1e-12

    def test_zero_length_rejected(self):
        with pytest.raises(InvalidDimensionError):
            dft_basis(0)


class TestSpectralize:
    """Test spectral chunking of feature-major vectors."""

    def test_constant_series_has_only_dc_term(self):
        v = spectralize(np.array([1.0, 1.0]), T=2, D=1)
        assert np.allclose(v.blocks[:, 0], [np.sqrt(2), 0.0], atol=1e-15)

    def test_alternating_series_has_only_nyquist_term(self):
        v = spectralize(np.array([1.0, -1.0]), T=2, D=1)
        assert np.allclose(v.blocks[:, 0], [0.0, np.sqrt(2)], atol=1e-15)

    def test_matches_dense_permutation_oracle(self, rng):
        q = rng.standard_normal(8)
        v = spectralize(q, T=4, D=2)
        assert np.max(np.abs(v.blocks - dense_spectral_transform(q, 4, 2))) < 1e-12

    def test_batch_matches_single_vectors(self, rng):
        Q = rng.standard_normal((5, 12))
        batch = spectralize_batch(Q, T=4, D=3)
        for n in range(5):
            assert np.allclose(batch[n], spectralize(Q[n], T=4, D=3).blocks)

    def test_non_finite_input_rejected(self):
        with pytest.raises(InvalidInputError):
            spectralize(np.array([1.0, np.nan]), T=2, D=1)

    def test_wrong_length_rejected(self):
        with pytest.raises(InvalidInputError):
            spectralize(np.ones(5), T=2, D=2)

    @given(shape=series_shapes, seed=st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_conjugate_symmetry_and_parseval(self, shape, seed):
        """
        **Feature: ckmm, Property 1: Spectral chunks of real series**

        For any real feature-major vector, chunk T-j is the conjugate of chunk j
        and the energy of every feature is preserved.
        """
        T, D = shape
        q = np.random.default_rng(seed).standard_normal(D * T)
        blocks = spectralize(q, T, D).blocks
        for j in range(1, T):
            assert np.max(np.abs(blocks[T - j] - np.conj(blocks[j]))) < 1e-10
        energy = np.sum(np.abs(blocks) ** 2, axis=0)
        expected = np.sum(q.reshape(D, T) ** 2, axis=1)
        assert np.allclose(energy, expected, rtol=1e-10, atol=1e-12)

    @given(shape=series_shapes, seed=st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_inverse_round_trip(self, shape, seed):
        """
        **Feature: ckmm, Property 2: Spectral round trip**

        Spectralizing and applying the inverse transform recovers the vector.
        """
        T, D = shape
        q = np.random.default_rng(seed).standard_normal(D * T)
        assert np.max(np.abs(inverse_spectralize(spectralize(q, T, D)) - q)) < 1e-10


class TestPermutationIndex:
    """Test the frequency-major permutation."""

    def test_forward_rule(self):
        index = permutation_index(3, 2)
        assert list(index.forward) == [0, 3, 1, 4, 2, 5]

    @pytest.mark.parametrize("T", range(1, 9))
    @pytest.mark.parametrize("D", range(1, 5))
    def test_inverse_composes_to_identity(self, T, D):
        index = permutation_index(T, D)
        z = np.arange(T * D) * 1.5
        assert np.array_equal(index.invert(index.apply(z)), z)


class TestCirculantEigenvalues:
    """Test eigenvalues of circulant approximations."""

    def test_identity_acf(self):
        assert np.allclose(circulant_eigenvalues({0: 1.0}, 4), np.ones(4))

    def test_two_point_circulant(self):
        assert np.allclose(circulant_eigenvalues({0: 1.0, 1: 0.5, -1: 0.5}, 2), [2.0, 0.0])

    def test_moving_average_acf_matches_dense_eigenvalues(self):
        theta = -0.2679
        r1 = theta / (1 + theta ** 2)
        T = 20
        eigenvalues = circulant_eigenvalues({0: 1.0, 1: r1, -1: r1}, T)
        row = np.zeros(T)
        row[0], row[1], row[-1] = 1.0, r1, r1
        dense = np.linalg.eigvalsh(circulant(row))
        assert np.max(np.abs(eigenvalues.imag)) < 1e-10
        assert np.max(np.abs(np.sort(eigenvalues.real) - dense)) < 1e-10

    def test_lag_outside_range_rejected(self):
        with pytest.raises(InvalidDimensionError):
            circulant_eigenvalues({0: 1.0, 4: 0.1}, 4)


class TestAssembleFullCorrelation:
    """Test reconstruction of dense block-circulant matrices."""

    def test_identity_blocks_give_identity(self):
        assert np.allclose(assemble_full_correlation(SpectralCorrelation.identity(5, 2)), np.eye(10), atol=1e-12)

    def test_round_trip_with_circulant_matrix(self):
        T = 4
        eigenvalues = circulant_eigenvalues({0: 1.0, 1: 0.5, -1: 0.5}, T)
        corr = SpectralCorrelation(blocks=eigenvalues.reshape(T, 1, 1))
        expected = circulant(np.array([1.0, 0.5, 0.0, 0.5]))
        assert np.max(np.abs(assemble_full_correlation(corr) - expected)) < 1e-10

    def test_toeplitz_blocks_of_banded_matrix(self):
        T, r1 = 6, 0.4
        R = np.eye(T) + r1 * (np.eye(T, k=1) + np.eye(T, k=-1))
        blocks = toeplitz_to_spectral_blocks(R, T, 1)
        assert np.allclose(blocks.blocks[:, 0, 0], circulant_eigenvalues({0: 1.0, 1: r1, -1: r1}, T))

    @given(shape=series_shapes, seed=st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_determinant_factorises_over_frequencies(self, shape, seed):
        """
        **Feature: ckmm, Property 3: Determinant factorisation**

        det of the assembled matrix equals the product of block determinants,
        and the assembled matrix is real symmetric.
        """
        T, D = shape
        blocks = random_spectral_blocks(np.random.default_rng(seed), T, D)
        dense = assemble_full_correlation(SpectralCorrelation(blocks=blocks))
        assert np.max(np.abs(dense - dense.T)) < 1e-10
        sign, logdet = np.linalg.slogdet(dense)
        block_logdet = sum(np.linalg.slogdet(b)[1] for b in blocks)
        assert sign > 0
        assert logdet == pytest.approx(block_logdet, rel=1e-8, abs=1e-8)

    def test_conjugate_symmetry_violation_rejected(self):
        blocks = np.broadcast_to(np.eye(2, dtype=complex), (4, 2, 2)).copy()
        blocks[1] = np.array([[1.0, 0.5j], [-0.5j, 1.0]])
        with pytest.raises(InconsistentBlocksError):
            assemble_full_correlation(SpectralCorrelation(blocks=blocks))

    def test_non_hermitian_blocks_rejected(self):
        blocks = np.broadcast_to(np.eye(2, dtype=complex), (2, 2, 2)).copy()
        blocks[0, 0, 1] = 0.3
        with pytest.raises(InconsistentBlocksError):
            SpectralCorrelation(blocks=blocks)

    def test_time_domain_diagonal(self, rng):
        blocks = random_spectral_blocks(rng, 6, 2)
        corr = SpectralCorrelation(blocks=blocks, ridge=0.1)
        dense = assemble_full_correlation(corr)
        diagonal = np.diag(dense).reshape(2, 6)
        assert np.allclose(diagonal, corr.time_domain_diagonal()[:, None])
