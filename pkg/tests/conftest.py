import numpy as np
import pytest


def gen(seed: int) -> np.random.Generator:
    """Philox stream used by test fixtures and the frozen oracles."""
    return np.random.Generator(np.random.Philox(seed))


def rel_err(actual, expected) -> float:
    expected = np.asarray(expected, dtype=float)
    denom = max(float(np.linalg.norm(expected)), np.finfo(float).tiny)
    return float(np.linalg.norm(np.asarray(actual, dtype=float) - expected) / denom)


def random_spd(g: np.random.Generator, dim: int) -> np.ndarray:
    b = g.standard_normal((dim, dim))
    m = b @ b.T + dim * 1e-3 * np.eye(dim)
    return 0.5 * (m + m.T)


def random_orthogonal(g: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(g.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def rng():
    return gen(2024)
