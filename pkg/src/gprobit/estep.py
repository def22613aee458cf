"""Conditional-moment E-step via the mean-field recursion.

For each region the latent residuals w_i = y*_i - beta'x_i are jointly
normal with covariance Z Sigma_G Z' + I before truncation.  The E-step
visits each observation in turn, forms the exact leave-one-out normal
conditional (through G x G solves only), plugs in the current estimates
of the other sites' first two moments, and reads the truncated-normal
moments off the univariate kernels.  Cross moments between sites are
factorised into products of first moments; the same factorisation gives
the plug-in variance correction carried through the second moments.

Two maps take the site moments to the random-effect moments E(u|y) and
E(uu'|y): the exact conditional-normal identities (any loadings), and
the group-average proxy (one-hot loadings only), which replaces u_g by
the within-group average of latent residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from ._backend import get_kernels
from .model import ModelParams, RegionBlock
from .truncnorm import trunc_moments_vec

__all__ = [
    "EStepError",
    "EStepState",
    "loo_conditional",
    "mean_field_sweep",
    "estep_region",
    "u_moments_exact",
    "u_moments_groupavg",
]


class EStepError(RuntimeError):
    pass


@dataclass
class EStepState:
    """Per-region conditional moments after an E-step.

    m1/m2 are the first and second conditional moments of the centred
    latents; lc2/lc3/lc4 the per-site central moments of the last inner
    sweep (consumed by the information matrix); Eu/Euu/cross the
    random-effect moments filled by the selected moment map.  ``cross``
    is E[u' Z' (y* - X beta) | y], needed by the Q-function.
    """

    m1: np.ndarray
    m2: np.ndarray
    lc2: np.ndarray
    lc3: np.ndarray
    lc4: np.ndarray
    Eu: np.ndarray | None = None
    Euu: np.ndarray | None = None
    cross: float = 0.0
    sweeps: int = 0
    converged: bool = False


def _pinv_of(params: ModelParams, S: np.ndarray) -> np.ndarray:
    # (Phi_G + Z'Z)^{-1}; positive definite whenever Phi_G is.
    P = params.phi_G + S
    c, low = linalg.cho_factor(P, lower=True)
    pinv = linalg.cho_solve((c, low), np.eye(P.shape[0]))
    return 0.5 * (pinv + pinv.T)


def _gram(block: RegionBlock) -> np.ndarray:
    if block.is_onehot:
        counts = np.bincount(block.group_index, minlength=block.n_groups)
        return np.diag(counts.astype(float))
    Z = block.Z
    return Z.T @ Z


def _init_state(block: RegionBlock, params: ModelParams, eta: np.ndarray) -> EStepState:
    # Independent-probit start: each site gets the truncated moments of
    # its marginal N(beta'x, 1 + z' Sigma_G z) latent.
    if block.is_onehot:
        s2 = 1.0 + np.diag(params.sigma_G)[block.group_index]
    else:
        Z = block.Z
        s2 = 1.0 + np.einsum("ig,gh,ih->i", Z, params.sigma_G, Z)
    lam1, l2c = trunc_moments_vec(eta, np.sqrt(s2), block.y)
    m1 = lam1 - eta
    n = block.n_obs
    return EStepState(
        m1=m1,
        m2=l2c + m1 * m1,
        lc2=np.zeros(n),
        lc3=np.zeros(n),
        lc4=np.zeros(n),
    )


def _run_sweeps(block, eta, pinv, state, max_sweeps, tol, backend):
    kern = get_kernels(backend)
    m1 = state.m1
    d = state.m2 - m1 * m1
    y8 = np.ascontiguousarray(block.y, dtype=np.int8)
    if block.is_onehot:
        grp = np.ascontiguousarray(block.group_index, dtype=np.int64)
        v = np.zeros(block.n_groups)
        np.add.at(v, grp, m1)
        tdiag = np.zeros(block.n_groups)
        np.add.at(tdiag, grp, d)
        sweeps, maxd = kern.sweep_onehot(
            eta, y8, grp, pinv, m1, state.m2, state.lc2, state.lc3,
            state.lc4, v, tdiag, max_sweeps, tol,
        )
        acc = (v, tdiag)
    else:
        Z = np.ascontiguousarray(block.Z)
        ZP = np.ascontiguousarray(Z @ pinv)
        v = Z.T @ m1
        T = (Z * d[:, None]).T @ Z
        sweeps, maxd = kern.sweep_dense(
            eta, y8, Z, ZP, m1, state.m2, state.lc2, state.lc3,
            state.lc4, v, T, max_sweeps, tol,
        )
        acc = (v, T)
    if not np.all(np.isfinite(state.m1)):
        bad = int(np.flatnonzero(~np.isfinite(state.m1))[0])
        raise EStepError(
            f"region {block.region_id}: non-finite moment at observation {bad}"
        )
    state.sweeps = sweeps
    state.converged = maxd < tol
    return acc


def _map_exact(params, S, pinv, v, T):
    # Conditional-normal identities with Sigma_r^{-1} applied through the
    # Woodbury form I - Z (Phi + Z'Z)^{-1} Z'; all products are G x G.
    sigma = params.sigma_G
    w = v - S @ (pinv @ v)
    Eu = sigma @ w
    A1 = np.eye(S.shape[0]) - S @ pinv
    mid = np.outer(w, w) + A1 @ T @ A1.T
    zsz = S - S @ pinv @ S
    Euu = sigma @ mid @ sigma + sigma - sigma @ zsz @ sigma
    Euu = 0.5 * (Euu + Euu.T)
    cross = float(v @ (sigma @ w)) + float(np.trace(sigma @ (A1 @ T)))
    return Eu, Euu, cross


def _map_groupavg(sigma_G, counts, v, tdiag):
    safe = np.where(counts > 0, counts, 1.0)
    Eu = np.where(counts > 0, v / safe, 0.0)
    extra = np.where(counts > 0, tdiag / (safe * safe), 0.0)
    Euu = np.outer(Eu, Eu)
    Euu[np.diag_indices_from(Euu)] += extra
    empty = counts == 0
    if empty.any():
        Euu[empty, :] = sigma_G[empty, :]
        Euu[:, empty] = sigma_G[:, empty]
    cross = float(np.dot(counts, np.diagonal(Euu)))
    return Eu, Euu, cross


def loo_conditional(block: RegionBlock, params: ModelParams, i: int,
                    state: EStepState) -> tuple[float, float]:
    """Leave-one-out normal conditional (mu_tilde, sigma_tilde^2) of site i.

    Plugs state.m1 in for the other sites' centred latents.  Equivalent
    to conditioning on the dense submatrix inverse but costs one G x G
    solve: with P = Phi_G + Z'Z and Omega = Sigma_r^{-1} = I - Z P^{-1} Z',
    the conditional variance is 1/Omega_ii and the mean offset is read
    off row i of Omega.
    """
    if not 0 <= i < block.n_obs:
        raise IndexError(f"observation {i} outside region {block.region_id}")
    S = _gram(block)
    pinv = _pinv_of(params, S)
    Z = block.Z
    z = Z[i]
    q = pinv @ z
    pzz = float(q @ z)
    st2 = 1.0 / (1.0 - pzz)
    v = Z.T @ state.m1
    a = st2 * (float(q @ v) - pzz * state.m1[i])
    eta_i = float(block.X[i] @ params.beta)
    return eta_i + a, st2


def mean_field_sweep(block: RegionBlock, params: ModelParams,
                     state: EStepState, backend: str | None = None) -> EStepState:
    """One Gauss-Seidel pass i = 1..n updating m1/m2 in ascending order."""
    out = replace(
        state,
        m1=state.m1.copy(), m2=state.m2.copy(),
        lc2=state.lc2.copy(), lc3=state.lc3.copy(), lc4=state.lc4.copy(),
    )
    eta = block.X @ params.beta
    pinv = _pinv_of(params, _gram(block))
    _run_sweeps(block, eta, pinv, out, 1, 0.0, backend)
    return out


def estep_region(block: RegionBlock, params: ModelParams, config=None,
                 state: EStepState | None = None,
                 backend: str | None = None) -> EStepState:
    """Full per-region E-step: sweeps plus the selected moment map.

    ``config`` needs attributes inner_sweeps, inner_tol and moment_map
    ('exact' or 'group_average'); warm starts pass the previous state.
    """
    inner_sweeps = getattr(config, "inner_sweeps", 1)
    inner_tol = getattr(config, "inner_tol", 1e-6)
    moment_map = getattr(config, "moment_map", "exact")
    if inner_sweeps < 1:
        raise ValueError("inner_sweeps must be >= 1")

    eta = block.X @ params.beta
    S = _gram(block)
    pinv = _pinv_of(params, S)
    if state is None:
        state = _init_state(block, params, eta)
    else:
        state = replace(
            state,
            m1=state.m1.copy(), m2=state.m2.copy(),
            lc2=state.lc2.copy(), lc3=state.lc3.copy(), lc4=state.lc4.copy(),
        )
    acc = _run_sweeps(block, eta, pinv, state, inner_sweeps,
                      inner_tol, backend)

    if moment_map == "group_average":
        if not block.is_onehot:
            raise EStepError(
                f"region {block.region_id}: group-average moments need one-hot "
                "loadings; use the exact moment map for dense Z"
            )
        counts = np.bincount(block.group_index, minlength=block.n_groups).astype(float)
        Eu, Euu, cross = _map_groupavg(params.sigma_G, counts, *acc)
    elif moment_map == "exact":
        v, T = acc
        if block.is_onehot:
            T = np.diag(T)
        Eu, Euu, cross = _map_exact(params, S, pinv, v, T)
    else:
        raise ValueError(f"unknown moment map {moment_map!r}")
    state.Eu, state.Euu, state.cross = Eu, Euu, cross
    return state


def u_moments_exact(block: RegionBlock, params: ModelParams,
                    state: EStepState) -> tuple[np.ndarray, np.ndarray]:
    """E(u|y) and E(uu'|y) from the conditional-normal identities."""
    S = _gram(block)
    pinv = _pinv_of(params, S)
    Z = block.Z
    d = state.m2 - state.m1 * state.m1
    v = Z.T @ state.m1
    T = (Z * d[:, None]).T @ Z
    Eu, Euu, _ = _map_exact(params, S, pinv, v, T)
    return Eu, Euu


def u_moments_groupavg(block: RegionBlock, params: ModelParams,
                       state: EStepState) -> tuple[np.ndarray, np.ndarray]:
    """Group-average proxy for E(u|y) and E(uu'|y); one-hot loadings only."""
    if not block.is_onehot:
        raise EStepError(
            f"region {block.region_id}: group-average moments need one-hot "
            "loadings; use u_moments_exact for dense Z"
        )
    counts = np.bincount(block.group_index, minlength=block.n_groups).astype(float)
    v = np.zeros(block.n_groups)
    np.add.at(v, block.group_index, state.m1)
    tdiag = np.zeros(block.n_groups)
    np.add.at(tdiag, block.group_index, state.m2 - state.m1 * state.m1)
    Eu, Euu, _ = _map_groupavg(params.sigma_G, counts, v, tdiag)
    return Eu, Euu
