"""
Pytest configuration and fixtures for testing.
"""

import logging

import numpy as np
import pytest

from ckmm.data_io import LongitudinalDataset
from ckmm.mixture import FitConfig


TOY_TS = """# toy archive file
@problemName toy
@timeStamps false
@missing false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1,2,3:4,5,6:b
7,8,9:10,11,12:a
"""


def random_spectral_blocks(rng, T, D, jitter=0.5):
    """Hermitian positive definite blocks with C_{T-j} = conj(C_j)."""
    blocks = np.empty((T, D, D), dtype=np.complex128)
    for j in range(T // 2 + 1):
        A = rng.standard_normal((D, D))
        if j != 0 and 2 * j != T:
            A = A + 1j * rng.standard_normal((D, D))
        blocks[j] = A @ np.conj(A.T) + jitter * np.eye(D)
    for j in range(T // 2 + 1, T):
        blocks[j] = np.conj(blocks[T - j])
    return blocks


def separated_values(rng, n_per_cluster=20, D=2, T=6, shift=4.0):
    """Two well-separated iid Gaussian clusters; returns (values, labels)."""
    first = rng.standard_normal((n_per_cluster, D, T))
    second = rng.standard_normal((n_per_cluster, D, T)) + shift
    labels = np.repeat([0, 1], n_per_cluster)
    return np.concatenate([first, second]), labels


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(20240607)


@pytest.fixture
def separated_dataset(rng):
    """Two well-separated clusters as a LongitudinalDataset plus true labels."""
    values, labels = separated_values(rng)
    return LongitudinalDataset(values=values), labels


@pytest.fixture
def fast_config():
    """Small GEM settings for unit tests."""
    return FitConfig(restarts=2, max_iterations=10, seed=3, threads=1)


@pytest.fixture
def toy_ts_file(tmp_path):
    """Two-case, two-dimension `.ts` file with class labels."""
    path = tmp_path / "toy.ts"
    path.write_text(TOY_TS, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def clean_ckmm_env(monkeypatch):
    """Keep CKMM_* variables from the host environment out of the tests."""
    for name in ("CKMM_THREADS", "CKMM_SEED", "CKMM_RESTARTS", "CKMM_OUTPUT_DIR",
                 "CKMM_RECORD_RUNTIME", "CKMM_LOG_LEVEL", "CKMM_LOG_FILE"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(autouse=True)
def reset_ckmm_logger():
    """Drop handlers that `ckmm.cli.main` attached to the package logger."""
    yield
    logger = logging.getLogger("ckmm")
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
