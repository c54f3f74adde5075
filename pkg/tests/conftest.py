import numpy as np
import pytest

from tracecip.gp import KernelSpec, build_covariance


def random_spd(rng: np.random.Generator, n: int, floor: float = 0.05) -> np.ndarray:
    """Random well-conditioned correlation-like SPD matrix."""
    a = rng.standard_normal((n, n + 2))
    cov = a @ a.T / (n + 2) + floor * np.eye(n)
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)


def random_gp_prior(rng: np.random.Generator, n: int) -> np.ndarray:
    """RBF prior with a random lengthscale, or a random SPD matrix."""
    if rng.random() < 0.5:
        return build_covariance(KernelSpec(l_eff=float(rng.uniform(0.5, 4.0)), jitter=1e-6), n)
    return random_spd(rng, n)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def rbf6():
    return build_covariance(KernelSpec(l_eff=6.0), 50)
