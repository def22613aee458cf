import numpy as np
import pytest

from gprobit.model import (DataError, Dataset, ModelParams, RegionBlock,
                           region_covariance, validate_dataset)

from .conftest import make_block, params_of, random_pd, rng_of


def test_zero_loadings_gives_identity(rng):
    block = RegionBlock(0, np.array([1, 0, 1], np.int8),
                        rng.standard_normal((3, 2)), 2,
                        loadings=np.zeros((3, 2)))
    params = params_of([0.0, 0.0], np.eye(2))
    assert np.allclose(region_covariance(block, params), np.eye(3))


def test_equicorrelation():
    # single group, all-ones loading column: sigma^2 * ones + I
    n, s2 = 4, 2.5
    block = RegionBlock(0, np.ones(n, np.int8), np.zeros((n, 1)), 1,
                        loadings=np.ones((n, 1)))
    params = params_of([0.0], np.array([[s2]]))
    want = s2 * np.ones((n, n)) + np.eye(n)
    assert np.allclose(region_covariance(block, params), want)


def test_matches_dense_multiply_oracle(rng):
    Z = rng.standard_normal((4, 2))
    sigma = random_pd(2, rng)
    block = RegionBlock(0, np.ones(4, np.int8), np.zeros((4, 1)), 2, loadings=Z)
    params = params_of([0.0], sigma)
    got = region_covariance(block, params)
    # element-by-element oracle
    want = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            want[i, j] = sum(
                Z[i, a] * sigma[a, b] * Z[j, b] for a in range(2) for b in range(2)
            ) + (1.0 if i == j else 0.0)
    assert np.allclose(got, want, atol=1e-12)


def test_covariance_eigenvalues_at_least_one():
    for seed in range(12):
        rng = rng_of(900, seed)
        block = make_block(rng, n=6, k=2, g=3, onehot=bool(seed % 2))
        params = params_of(np.zeros(2), random_pd(3, rng))
        w = np.linalg.eigvalsh(region_covariance(block, params))
        assert w.min() >= 1.0 - 1e-8


def test_dimension_mismatch_names_block(rng):
    block = make_block(rng, n=5, k=2, g=3, region_id=42)
    params = params_of(np.zeros(2), np.eye(4))
    with pytest.raises(DataError, match="42"):
        region_covariance(block, params)


def test_params_cached_inverse():
    sigma = random_pd(4, rng_of(5))
    p = ModelParams.from_covariance(np.zeros(2), sigma)
    assert np.allclose(p.sigma_G @ p.phi_G, np.eye(4), atol=1e-8)
    p2 = ModelParams.from_precision(np.zeros(2), p.phi_G)
    assert np.allclose(p2.sigma_G, sigma, atol=1e-8)


def test_params_reject_inconsistent_inverse():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(1), np.eye(2), 2.0 * np.eye(2))
    with pytest.raises(ValueError):
        ModelParams.from_precision(np.array([np.nan]), np.eye(2))
    with pytest.raises(ValueError):
        ModelParams.from_precision(np.zeros(1), -np.eye(2))


def test_validate_dataset_onehot_construction():
    rows = [
        (1, 1, 1, np.array([0.5])),
        (1, 0, 2, np.array([-0.25])),
        (2, 1, 2, np.array([1.5])),
    ]
    ds = validate_dataset(rows, 1, 2)
    assert ds.n_regions == 2
    assert ds.is_onehot
    z = ds.regions[0].Z
    assert np.array_equal(z, np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_validate_dataset_rejections():
    with pytest.raises(DataError, match="row 2"):
        validate_dataset([(1, 1, 1, np.array([0.0])),
                          (1, 2, 1, np.array([0.0]))], 1, 2)
    with pytest.raises(DataError, match="row 1"):
        validate_dataset([(1, 1, 5, np.array([0.0]))], 1, 2)
    with pytest.raises(DataError, match="row 2"):
        validate_dataset([(1, 1, 1, np.array([0.0])),
                          (1, 1, 1, np.array([0.0, 1.0]))], 1, 2)
    with pytest.raises(DataError):
        Dataset((), 1, 2)


def test_duplicate_region_ids(rng):
    b = make_block(rng, 3, 1, 2, region_id=7)
    with pytest.raises(DataError, match="duplicate"):
        Dataset((b, b), 1, 2)


def test_csv_round_trip(tmp_path):
    from gprobit.bench import SimDesign, gen_dataset
    from gprobit.io import read_dataset_csv, write_dataset_csv

    ds, _ = gen_dataset(SimDesign(N=10, G=4, R=100, seed=13))
    path = tmp_path / "data.csv"
    write_dataset_csv(path, ds)
    back = read_dataset_csv(path)
    assert back.n_regions == ds.n_regions
    assert back.n_covariates == ds.n_covariates
    assert back.n_groups == ds.n_groups
    for a, b in zip(ds.regions, back.regions):
        assert a.region_id == b.region_id
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.group_index, b.group_index)
        assert np.array_equal(a.X, b.X)  # 17g round-trips exactly


def test_csv_round_trip_dense(tmp_path, rng):
    from gprobit.io import read_dataset_csv, write_dataset_csv

    blocks = tuple(make_block(rng, 6, 2, 3, region_id=r, onehot=False)
                   for r in range(3))
    ds = Dataset(blocks, 2, 3)
    path = tmp_path / "dense.csv"
    write_dataset_csv(path, ds)
    back = read_dataset_csv(path)
    for a, b in zip(ds.regions, back.regions):
        assert np.array_equal(a.Z, b.Z)
        assert np.array_equal(a.X, b.X)
