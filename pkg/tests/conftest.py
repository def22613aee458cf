import numpy as np
import pytest

from gprobit.model import Dataset, ModelParams, RegionBlock


def rng_of(*seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def random_pd(g, rng, scale=1.0):
    a = rng.standard_normal((g, g))
    m = a @ a.T / g + 0.3 * np.eye(g)
    return scale * m


def make_block(rng, n, k, g, region_id=0, onehot=True, beta=None, sigma=None):
    """Simulated block drawn from the actual generative model."""
    beta = np.zeros(k) if beta is None else beta
    sigma = np.eye(g) if sigma is None else sigma
    X = rng.standard_normal((n, k))
    if onehot:
        grp = rng.integers(0, g, size=n)
        Z = np.zeros((n, g))
        Z[np.arange(n), grp] = 1.0
    else:
        grp = None
        Z = rng.standard_normal((n, g)) * 0.7
    u = np.linalg.cholesky(sigma) @ rng.standard_normal(g)
    ystar = X @ beta + Z @ u + rng.standard_normal(n)
    y = (ystar >= 0).astype(np.int8)
    if onehot:
        return RegionBlock(region_id, y, X, g, group_index=grp.astype(np.int64))
    return RegionBlock(region_id, y, X, g, loadings=Z)


def make_dataset(rng, n_regions, n, k, g, onehot=True, beta=None, sigma=None):
    blocks = tuple(
        make_block(rng, n, k, g, region_id=r, onehot=onehot, beta=beta, sigma=sigma)
        for r in range(n_regions)
    )
    return Dataset(blocks, k, g)


@pytest.fixture
def rng():
    return rng_of(20250809)


def params_of(beta, sigma):
    return ModelParams.from_covariance(np.asarray(beta, float), np.asarray(sigma, float))
