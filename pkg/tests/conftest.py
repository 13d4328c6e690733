import numpy as np
import pytest


def random_spd(rng, n, scale=1.0):
    """Random symmetric positive-definite matrix with decent conditioning."""
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


def random_cov(rng, n, scale=1.0):
    """Random SPD with smaller eigenvalue spread, usable as a covariance."""
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + np.eye(n))


def random_simplex(rng, k):
    p = rng.random(k) + 1e-3
    return p / p.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
