import math

import numpy as np
import pytest

from gprobit.em import EMConfig
from gprobit.estep import (EStepError, estep_region, loo_conditional,
                           mean_field_sweep, u_moments_exact, u_moments_groupavg)
from gprobit.mcem import GibbsConfig, gibbs_latent
from gprobit.model import Dataset, RegionBlock
from gprobit.truncnorm import trunc_moments

from .conftest import make_block, params_of, random_pd, rng_of
from .oracles import dense_loo, dense_u_moments

HN = math.sqrt(2.0 / math.pi)


def cfg(**kw):
    base = dict(max_outer=1, inner_sweeps=1, inner_tol=1e-6, moment_map="exact")
    base.update(kw)
    return EMConfig(**base)


def zero_block(rng, n, k, g):
    return RegionBlock(0, rng.integers(0, 2, n).astype(np.int8),
                       rng.standard_normal((n, k)), g,
                       loadings=np.zeros((n, g)))


# ---------------------------------------------------------------- loo


def test_loo_zero_loadings(rng):
    block = zero_block(rng, 5, 2, 2)
    params = params_of(rng.standard_normal(2), random_pd(2, rng))
    state = estep_region(block, params, cfg())
    mu, s2 = loo_conditional(block, params, 2, state)
    assert mu == pytest.approx(float(block.X[2] @ params.beta), abs=1e-12)
    assert s2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("onehot", [False, True])
def test_loo_matches_dense_inverse(onehot):
    rng = rng_of(11, onehot)
    block = make_block(rng, n=6, k=2, g=2, onehot=onehot)
    params = params_of(rng.standard_normal(2), random_pd(2, rng))
    state = estep_region(block, params, cfg())
    for i in range(block.n_obs):
        mu, s2 = loo_conditional(block, params, i, state)
        mu_o, s2_o = dense_loo(block, params, i, state.m1)
        assert mu == pytest.approx(mu_o, abs=1e-10)
        assert s2 == pytest.approx(s2_o, abs=1e-10)
        sigma_ii = 1.0 + float(block.Z[i] @ params.sigma_G @ block.Z[i])
        assert 0.0 < s2 <= sigma_ii + 1e-12


def test_loo_singleton_group():
    # observation alone in its group: correlation comes only through the
    # other groups' covariance
    rng = rng_of(31)
    grp = np.array([0, 1, 1, 1], dtype=np.int64)
    block = RegionBlock(0, np.array([1, 0, 1, 1], np.int8),
                        rng.standard_normal((4, 1)), 2, group_index=grp)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    state = estep_region(block, params, cfg())
    mu, s2 = loo_conditional(block, params, 0, state)
    mu_o, s2_o = dense_loo(block, params, 0, state.m1)
    assert mu == pytest.approx(mu_o, abs=1e-10)
    assert s2 == pytest.approx(s2_o, abs=1e-10)


# ---------------------------------------------------------------- sweeps


def test_sweep_independent_half_normal(rng):
    block = zero_block(rng, 8, 1, 2)
    params = params_of(np.zeros(1), np.eye(2))
    state = estep_region(block, params, cfg())
    want = np.where(block.y == 1, HN, -HN)
    assert np.allclose(state.m1, want, atol=1e-12)
    assert np.allclose(state.m2, 1.0, atol=1e-12)


def test_fixed_point_idempotent():
    rng = rng_of(77)
    block = make_block(rng, n=7, k=1, g=2)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    state = estep_region(block, params, cfg(inner_sweeps=800, inner_tol=1e-13))
    assert state.converged
    again = mean_field_sweep(block, params, state)
    assert np.max(np.abs(again.m1 - state.m1)) < 1e-10
    assert np.max(np.abs(again.m2 - state.m2)) < 1e-10


def test_single_sweep_equals_config_one():
    rng = rng_of(78)
    block = make_block(rng, n=5, k=1, g=2)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    s1 = estep_region(block, params, cfg(inner_sweeps=1))
    s2 = mean_field_sweep(block, params, estep_region(block, params, cfg(), state=None))
    # same starting point, one pass each
    base = estep_region(block, params, cfg(inner_sweeps=1))
    assert np.array_equal(s1.m1, base.m1)
    assert s1.sweeps == 1


def test_fixed_point_order_insensitive():
    # permuting the observations changes the sweep order; the fixed point
    # must agree within loose tolerance
    rng = rng_of(79)
    block = make_block(rng, n=5, k=1, g=2)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    tight = cfg(inner_sweeps=2000, inner_tol=1e-12)
    s = estep_region(block, params, tight)
    perm = rng.permutation(5)
    pblock = RegionBlock(0, block.y[perm], block.X[perm], 2,
                         group_index=block.group_index[perm])
    sp = estep_region(pblock, params, tight)
    assert np.max(np.abs(sp.m1 - s.m1[perm])) < 1e-6
    assert np.max(np.abs(sp.m2 - s.m2[perm])) < 1e-6


def test_warm_start_not_slower():
    rng = rng_of(80)
    block = make_block(rng, n=40, k=1, g=3)
    params = params_of(rng.standard_normal(1), random_pd(3, rng))
    tight = cfg(inner_sweeps=500, inner_tol=1e-10)
    cold = estep_region(block, params, tight)
    warm = estep_region(block, params, tight, state=cold)
    assert warm.sweeps <= cold.sweeps


def test_moment_inequality_and_sides():
    rng = rng_of(81)
    block = make_block(rng, n=30, k=2, g=3, beta=np.array([0.8, -0.4]))
    params = params_of(np.array([0.8, -0.4]), random_pd(3, rng))
    st = estep_region(block, params, cfg(inner_sweeps=4))
    assert np.all(st.m2 >= st.m1 ** 2 - 1e-8)
    eta = block.X @ params.beta
    latent_mean = st.m1 + eta
    assert np.all(np.where(block.y == 1, latent_mean > 0, latent_mean < 0))


def test_region_order_bit_identical():
    rng = rng_of(82)
    blocks = [make_block(rng, 10, 1, 2, region_id=r) for r in range(4)]
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    states = [estep_region(b, params, cfg()) for b in blocks]
    rev = [estep_region(b, params, cfg()) for b in reversed(blocks)][::-1]
    for a, b in zip(states, rev):
        assert np.array_equal(a.m1, b.m1)
        assert np.array_equal(a.Euu, b.Euu)


# ---------------------------------------------------------------- u maps


def test_u_moments_zero_loadings(rng):
    block = zero_block(rng, 6, 1, 3)
    sigma = random_pd(3, rng)
    params = params_of(np.zeros(1), sigma)
    st = estep_region(block, params, cfg())
    assert np.allclose(st.Eu, 0.0, atol=1e-12)
    assert np.allclose(st.Euu, sigma, atol=1e-12)


def test_u_moments_exact_matches_dense():
    for onehot in (False, True):
        rng = rng_of(83, onehot)
        block = make_block(rng, n=8, k=1, g=3, onehot=onehot)
        params = params_of(rng.standard_normal(1), random_pd(3, rng))
        st = estep_region(block, params, cfg(inner_sweeps=3))
        Eu, Euu = u_moments_exact(block, params, st)
        Eu_o, Euu_o = dense_u_moments(block, params, st.m1, st.m2)
        assert np.allclose(Eu, Eu_o, atol=1e-10)
        assert np.allclose(Euu, Euu_o, atol=1e-10)
        # conditional covariance stays PSD
        w = np.linalg.eigvalsh(Euu - np.outer(Eu, Eu))
        assert w.min() > -1e-6


def test_u_moments_exact_centered_zero_mean():
    # m1 = 0: Euu reduces to the diagonal-sandwich plus prior terms
    rng = rng_of(84)
    block = make_block(rng, n=8, k=1, g=2)
    params = params_of(np.zeros(1), random_pd(2, rng))
    st = estep_region(block, params, cfg())
    st.m1 = np.zeros(8)
    st.m2 = rng.uniform(0.5, 1.5, 8)
    Eu, Euu = u_moments_exact(block, params, st)
    assert np.allclose(Eu, 0.0, atol=1e-12)
    _, Euu_o = dense_u_moments(block, params, st.m1, st.m2)
    assert np.allclose(Euu, Euu_o, atol=1e-10)


def test_u_moments_scalar_case():
    # one observation, one group: conditional of a bivariate normal
    rng = rng_of(85)
    s2 = 1.7
    block = RegionBlock(0, np.array([1], np.int8), np.array([[0.4]]), 1,
                        group_index=np.array([0], np.int64))
    params = params_of(np.array([0.6]), np.array([[s2]]))
    st = estep_region(block, params, cfg())
    Eu, Euu = u_moments_exact(block, params, st)
    var_y = 1.0 + s2
    m1, m2 = st.m1[0], st.m2[0]
    want_Eu = s2 / var_y * m1
    want_Euu = (s2 / var_y) ** 2 * m2 + s2 - s2 ** 2 / var_y
    assert Eu[0] == pytest.approx(want_Eu, rel=1e-12)
    assert Euu[0, 0] == pytest.approx(want_Euu, rel=1e-12)


def test_groupavg_singletons():
    rng = rng_of(86)
    grp = np.arange(3, dtype=np.int64)
    block = RegionBlock(0, np.array([1, 0, 1], np.int8),
                        rng.standard_normal((3, 1)), 3, group_index=grp)
    params = params_of(rng.standard_normal(1), random_pd(3, rng))
    st = estep_region(block, params, cfg(moment_map="group_average"))
    assert np.allclose(st.Eu, st.m1)


def test_groupavg_double_sum_oracle():
    rng = rng_of(87)
    grp = np.array([0, 0, 0, 1, 1], dtype=np.int64)
    block = RegionBlock(0, np.array([1, 0, 1, 1, 0], np.int8),
                        rng.standard_normal((5, 1)), 2, group_index=grp)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    st = estep_region(block, params, cfg())
    m1, m2 = st.m1, st.m2
    Eu, Euu = u_moments_groupavg(block, params, st)
    # brute-force double sums under the product factorisation
    for g in range(2):
        members = np.flatnonzero(grp == g)
        assert Eu[g] == pytest.approx(m1[members].mean(), rel=1e-12)
        for h in range(2):
            amem, bmem = np.flatnonzero(grp == g), np.flatnonzero(grp == h)
            total = 0.0
            for i in amem:
                for j in bmem:
                    total += m2[i] if i == j else m1[i] * m1[j]
            want = total / (len(amem) * len(bmem))
            assert Euu[g, h] == pytest.approx(want, rel=1e-12)


def test_groupavg_empty_group_prior_fallback():
    rng = rng_of(88)
    grp = np.zeros(4, dtype=np.int64)  # group 1 empty
    sigma = random_pd(2, rng)
    block = RegionBlock(0, np.array([1, 1, 0, 1], np.int8),
                        rng.standard_normal((4, 1)), 2, group_index=grp)
    params = params_of(rng.standard_normal(1), sigma)
    st = estep_region(block, params, cfg(moment_map="group_average"))
    assert st.Eu[1] == 0.0
    assert st.Euu[1, 1] == pytest.approx(sigma[1, 1])
    assert st.Euu[0, 1] == pytest.approx(sigma[0, 1])


def test_groupavg_rejects_dense(rng):
    block = make_block(rng, 5, 1, 2, onehot=False)
    params = params_of(rng.standard_normal(1), random_pd(2, rng))
    st = estep_region(block, params, cfg())
    with pytest.raises(EStepError, match="exact"):
        u_moments_groupavg(block, params, st)
    with pytest.raises(EStepError, match="exact"):
        estep_region(block, params, cfg(moment_map="group_average"))


# ------------------------------------------------------- gibbs agreement


def gibbs_reference_moments(block, params, n, seed):
    draws = gibbs_latent(block, params,
                         GibbsConfig(n_samples=n, burn_in=300, seed=seed))
    eta = block.X @ params.beta
    w = draws - eta
    return w.mean(axis=0), (w ** 2).mean(axis=0), w


def test_meanfield_matches_gibbs_equicorrelated():
    # 3 observations, one shared effect: the fixed point of the sweeps
    # tracks the true conditional moments to Monte Carlo accuracy
    rng = rng_of(89)
    grp = np.zeros(3, dtype=np.int64)
    block = RegionBlock(0, np.array([1, 1, 0], np.int8),
                        rng.standard_normal((3, 1)), 1, group_index=grp)
    params = params_of(np.array([0.5]), np.array([[0.8]]))
    st = estep_region(block, params, cfg(inner_sweeps=400, inner_tol=1e-12))
    n = 400_000
    m1g, m2g, w = gibbs_reference_moments(block, params, n, seed=5)
    # effective sample size is reduced by chain autocorrelation; a factor
    # 10 is conservative for this small block
    se1 = np.std(w, axis=0) / math.sqrt(n / 10)
    assert np.all(np.abs(st.m1 - m1g) < 3 * se1 + 0.01)


def test_exact_umoments_match_gibbs_small_block():
    # moderate coupling: the factorised-moment error stays inside the
    # Monte Carlo band at this scale (it grows with the coupling and is
    # the accepted approximation, not a defect)
    rng = rng_of(90)
    block = make_block(rng, n=4, k=1, g=2)
    params = params_of(np.array([0.3]), 0.5 * random_pd(2, rng))
    st = estep_region(block, params, cfg(inner_sweeps=500, inner_tol=1e-12))
    draws = gibbs_latent(block, params,
                         GibbsConfig(n_samples=300_000, burn_in=500, seed=9))
    eta = block.X @ params.beta
    w = draws - eta
    Z = block.Z
    sigma = params.sigma_G
    from gprobit.model import region_covariance

    Sinv = np.linalg.inv(region_covariance(block, params))
    A = sigma @ Z.T @ Sinv
    u_draws = w @ A.T
    Eu_mc = u_draws.mean(axis=0)
    cov_correction = sigma - sigma @ Z.T @ Sinv @ Z @ sigma
    Euu_mc = (u_draws.T @ u_draws) / len(u_draws) + cov_correction
    se = np.std(u_draws, axis=0) / math.sqrt(len(u_draws) / 10)
    assert np.all(np.abs(st.Eu - Eu_mc) < 3 * se + 0.01)
    assert np.max(np.abs(st.Euu - Euu_mc)) < 0.02
