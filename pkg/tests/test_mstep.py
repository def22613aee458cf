import numpy as np
import pytest

from gprobit.em import EMConfig
from gprobit.estep import estep_region
from gprobit.model import Dataset, RegionBlock
from gprobit.mstep import (CollinearityError, GlassoConfig, PrecisionUpdateError,
                           glasso, glasso_kkt_residual, update_beta,
                           update_phi_diagonal, update_phi_ml)

from .conftest import make_block, params_of, random_pd, rng_of
from .oracles import cvxpy_glasso, statsmodels_probit


def _zero_loading_dataset(rng, n_regions=4, n=40, k=2):
    blocks = []
    for r in range(n_regions):
        X = rng.standard_normal((n, k))
        y = (X @ np.array([1.0, -0.5]) + rng.standard_normal(n) >= 0).astype(np.int8)
        blocks.append(RegionBlock(r, y, X, 1, loadings=np.zeros((n, 1))))
    return Dataset(tuple(blocks), k, 1)


def test_update_beta_probit_fixed_point():
    rng = rng_of(21)
    ds = _zero_loading_dataset(rng)
    beta_ml = statsmodels_probit(ds)
    params = params_of(beta_ml, np.eye(1))
    cfg = EMConfig(moment_map="exact")
    states = [estep_region(b, params, cfg) for b in ds.regions]
    new = update_beta(ds, states, params.beta)
    assert np.max(np.abs(new - beta_ml)) < 1e-6  # ML estimate is the fixed point


def test_update_beta_moves_toward_fixed_point():
    rng = rng_of(22)
    ds = _zero_loading_dataset(rng)
    beta_ml = statsmodels_probit(ds)
    start = np.zeros(2)
    params = params_of(start, np.eye(1))
    cfg = EMConfig(moment_map="exact")
    states = [estep_region(b, params, cfg) for b in ds.regions]
    new = update_beta(ds, states, start)
    assert np.linalg.norm(new - beta_ml) < np.linalg.norm(start - beta_ml)


def test_update_beta_scalar_hand_sums():
    rng = rng_of(23)
    blocks = [make_block(rng, 4, 1, 2, region_id=r) for r in range(2)]
    ds = Dataset(tuple(blocks), 1, 2)
    params = params_of(np.array([0.4]), random_pd(2, rng))
    cfg = EMConfig(moment_map="exact")
    states = [estep_region(b, params, cfg) for b in ds.regions]
    num = den = 0.0
    for b, st in zip(ds.regions, states):
        x = b.X[:, 0]
        target = st.m1 + x * 0.4 - st.Eu[b.group_index]
        num += float(x @ target)
        den += float(x @ x)
    got = update_beta(ds, states, params.beta)
    assert got[0] == pytest.approx(num / den, rel=1e-12)


def test_update_beta_collinear_columns():
    rng = rng_of(24)
    X = rng.standard_normal((30, 1))
    X = np.hstack([X, X])  # duplicated covariate
    y = (X[:, 0] + rng.standard_normal(30) >= 0).astype(np.int8)
    ds = Dataset((RegionBlock(0, y, X, 1, loadings=np.zeros((30, 1))),), 2, 1)
    params = params_of(np.zeros(2), np.eye(1))
    cfg = EMConfig(moment_map="exact")
    states = [estep_region(b, params, cfg) for b in ds.regions]
    with pytest.raises(CollinearityError, match=r"columns \[(0|1)"):
        update_beta(ds, states, params.beta)


def test_phi_ml_identity_and_diagonal():
    assert np.allclose(update_phi_ml(np.eye(3)), np.eye(3))
    got = update_phi_ml(np.diag([4.0, 0.25]))
    assert np.allclose(got, np.diag([0.25, 4.0]))


def test_phi_ml_random_residual():
    s = random_pd(5, rng_of(25))
    phi = update_phi_ml(s)
    assert np.max(np.abs(phi @ s - np.eye(5))) < 1e-9
    assert np.allclose(phi, phi.T)


def test_phi_ml_rejects_indefinite():
    s = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
    with pytest.raises(PrecisionUpdateError, match="penalised"):
        update_phi_ml(s)


def test_phi_diagonal():
    s = random_pd(3, rng_of(26))
    got = update_phi_diagonal(s)
    assert np.allclose(got, np.diag(1.0 / np.diag(s)))


# ---------------------------------------------------------------- glasso


def test_glasso_zero_penalty_equals_ml():
    s = random_pd(4, rng_of(27))
    res = glasso(s, 0.0, n_regions=10)
    assert np.max(np.abs(res.phi - update_phi_ml(s))) < 1e-6


def test_glasso_full_shrinkage_limit():
    s = random_pd(4, rng_of(28))
    off = np.abs(s - np.diag(np.diag(s))).max()
    n_regions = 6
    rho = 0.5 * n_regions * off  # rho_eff = max off-diagonal
    res = glasso(s, rho * 1.0000001, n_regions=n_regions)
    assert np.allclose(res.phi, np.diag(np.diag(res.phi)))
    assert np.allclose(np.diag(res.phi), 1.0 / np.diag(s), rtol=1e-8)


def test_glasso_matches_convex_solver():
    s = np.array([[1.0, 0.6], [0.6, 1.0]])
    rho_eff = 0.25
    res = glasso(s, rho_eff / 2.0, n_regions=1)  # rho_eff = 2 rho / R
    want = cvxpy_glasso(s, rho_eff)
    assert np.max(np.abs(res.phi - want)) < 1e-5


def test_glasso_matches_convex_solver_larger():
    s = random_pd(4, rng_of(29))
    d = 1.0 / np.sqrt(np.diag(s))
    s = s * np.outer(d, d)  # unit diagonal for a well-scaled problem
    rho_eff = 0.15
    res = glasso(s, rho_eff / 2.0, n_regions=1)
    want = cvxpy_glasso(s, rho_eff)
    assert np.max(np.abs(res.phi - want)) < 2e-5


def test_glasso_kkt_and_monotone_objective():
    s = random_pd(5, rng_of(30))
    res = glasso(s, 0.8, n_regions=4, config=GlassoConfig(kkt_tol=1e-8))
    assert res.kkt_residual <= 1e-8
    diffs = np.diff(res.objective_path)
    assert np.all(diffs >= -1e-12)


def test_glasso_monotone_sparsity_in_rho():
    s = random_pd(6, rng_of(31))
    n_regions = 8
    off = np.abs(s - np.diag(np.diag(s))).max()
    grid = np.geomspace(0.6 * n_regions * off, 1e-4, 20)
    nnz_prev = None
    phi = None
    for rho in grid[::-1]:  # increasing rho, warm start from denser fits
        phi = glasso(s, rho, n_regions=n_regions, phi_init=phi).phi
        nnz = int(np.sum(np.abs(np.triu(phi, 1)) > 1e-8))
        if nnz_prev is not None:
            assert nnz <= nnz_prev
        nnz_prev = nnz


def test_glasso_exact_symmetry_and_zeros():
    s = random_pd(5, rng_of(32))
    res = glasso(s, 1.2, n_regions=4)
    assert np.array_equal(res.phi, res.phi.T)
    # thresholded entries are exact zeros, not tiny numbers
    small = np.abs(res.phi[np.triu_indices(5, 1)])
    assert np.all((small == 0.0) | (small > 1e-8))


def test_glasso_warm_start_agrees_with_cold():
    s = random_pd(4, rng_of(33))
    tight = GlassoConfig(kkt_tol=1e-10, max_iter=2000)
    cold = glasso(s, 0.5, n_regions=4, config=tight)
    warm = glasso(s, 0.5, n_regions=4, phi_init=update_phi_ml(s), config=tight)
    assert np.max(np.abs(cold.phi - warm.phi)) < 1e-6


def test_glasso_nonconvergence_reports_residual():
    s = random_pd(4, rng_of(34))
    with pytest.raises(Exception, match="residual"):
        glasso(s, 0.3, n_regions=4, config=GlassoConfig(max_iter=1, kkt_tol=1e-14))


def test_kkt_residual_of_exact_solution():
    s = random_pd(3, rng_of(35))
    phi = update_phi_ml(s)
    assert glasso_kkt_residual(phi, s, 0.0) < 1e-10
