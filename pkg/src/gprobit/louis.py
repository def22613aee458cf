"""Observed information via the complete-data gradient/curvature identity.

The observed-data curvature equals the expected complete-data curvature
plus the conditional covariance of the complete-data score.  Under the
group-average proxy u_g ~ (1/m_g) sum_{i in g} (y*_i - beta'x_i), every
score term becomes a linear or quadratic form in the centred latents,
whose conditional moments follow from the per-site means, variances,
skewness and kurtosis produced by the E-step (cross-site moments
factorised as in the E-step).  Third/fourth-moment corrections enter
through the diagonal skew/excess-kurtosis matrices of the quadratic-form
moment formulas; all assembly happens at group level, so nothing of size
n x n is ever formed.

Parameters are ordered beta[0..K-1] then the upper-triangle precision
entries phi[g,h] for g <= h, row by row.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .estep import EStepState
from .model import Dataset, ModelParams

__all__ = [
    "InfoBlocks",
    "lambda_matrices",
    "quadform_expectations",
    "observed_information",
    "standard_errors",
    "precision_param_pairs",
]


@dataclass
class InfoBlocks:
    B_bb: np.ndarray       # (K, K)
    B_bphi: np.ndarray     # (K, P)
    B_phiphi: np.ndarray   # (P, P)
    assembled: np.ndarray  # (K+P, K+P), symmetric
    param_names: list


def precision_param_pairs(G: int) -> list[tuple[int, int]]:
    """Upper-triangle (g, h) pairs in parameter order."""
    return [(g, h) for g in range(G) for h in range(g, G)]


def lambda_matrices(state: EStepState) -> tuple[np.ndarray, np.ndarray]:
    """Skewness and excess-kurtosis diagonals of the per-site conditional
    truncated distributions, from the central moments the E-step stored."""
    lc2 = state.lc2
    if np.any(lc2 <= 0):
        bad = int(np.flatnonzero(lc2 <= 0)[0])
        raise FloatingPointError(
            f"non-positive conditional variance at observation {bad}"
        )
    lam3 = state.lc3 / lc2 ** 1.5
    lam4 = state.lc4 / lc2 ** 2 - 3.0
    return lam3, lam4


def quadform_expectations(m1, var_diag, lambda3, lambda4, A, B):
    """Moments of quadratic forms in independent non-normal coordinates.

    For z with mean offset ``m1`` (= mu - x), diagonal covariance
    ``var_diag`` and per-coordinate skewness/excess kurtosis, returns

        e_qq   = E[(z-x)'A(z-x) (z-x)'B(z-x)]
        e_qlin = E[(z-x)'A(z-x) (z-x)]

    Asymmetric inputs are symmetrised, which leaves the forms unchanged.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    m1 = np.asarray(m1, dtype=float)
    d = np.asarray(var_diag, dtype=float)
    if np.any(d <= 0):
        raise ValueError("var_diag must be strictly positive")
    s = np.sqrt(d)
    s3 = s * d
    lam3 = np.asarray(lambda3, dtype=float)
    lam4 = np.asarray(lambda4, dtype=float)

    Ad = np.diag(A)
    Bd = np.diag(B)
    trA = float(np.dot(Ad, d))          # tr(A Sigma)
    trB = float(np.dot(Bd, d))
    Am = A @ m1
    Bm = B @ m1
    mAm = float(m1 @ Am)
    mBm = float(m1 @ Bm)

    # fourth- and second-order trace terms
    t4 = float(np.sum(lam4 * d * d * Ad * Bd))
    t2 = 2.0 * float(d @ ((A * B) @ d))  # 2 tr(Sigma B Sigma A), Sigma = diag(d)
    # skewness couplings
    skA = lam3 * s3 * Ad
    skB = lam3 * s3 * Bd
    e_qq = (
        t4 + trA * trB + t2
        + 2.0 * float(skA @ Bm) + 2.0 * float(skB @ Am)
        + trA * mBm + trB * mAm
        + 4.0 * float(Am @ (d * Bm))
        + mAm * mBm
    )
    e_qlin = skA + trA * m1 + 2.0 * d * Am + mAm * m1
    return e_qq, e_qlin


def _require_onehot(dataset):
    if not dataset.is_onehot:
        raise ValueError(
            "the information matrix uses the group-average proxy and needs "
            "one-hot loadings"
        )


def observed_information(dataset: Dataset, params: ModelParams,
                         states) -> InfoBlocks:
    """Assemble the observed-information blocks at the fitted parameters.

    Expects converged states carrying per-site central moments.  Empty
    groups in a region contribute nothing to that region's score terms
    (their group average does not exist) and trigger a warning.
    """
    _require_onehot(dataset)
    K = dataset.n_covariates
    G = dataset.n_groups
    R = dataset.n_regions
    pairs = precision_param_pairs(G)
    P = len(pairs)

    # per-region group-level reductions, stacked over regions
    v1 = np.zeros((R, G))      # group sums of m1
    Tg = np.zeros((R, G))      # group sums of d = m2 - m1^2
    s3g = np.zeros((R, G))     # group sums of lambda3 * d^{3/2}
    s4g = np.zeros((R, G))     # group sums of lambda4 * d^2
    minv = np.zeros((R, G))    # 1/m_g, zero for empty groups
    Cd = np.zeros((R, G, K))   # group sums of Xw_i * d_i
    C3 = np.zeros((R, G, K))   # group sums of Xw_i * lambda3_i d_i^{3/2}
    B_bb = np.zeros((K, K))

    warned_empty = False
    for r, (block, st) in enumerate(zip(dataset.regions, states)):
        grp = block.group_index
        counts = np.bincount(grp, minlength=G).astype(float)
        if np.any(counts == 0) and not warned_empty:
            warnings.warn(
                "some groups have no observations in a region; their "
                "precision rows rely on prior curvature only",
                RuntimeWarning,
                stacklevel=2,
            )
            warned_empty = True
        mi = np.where(counts > 0, 1.0 / np.where(counts > 0, counts, 1.0), 0.0)
        minv[r] = mi
        lam3, lam4 = lambda_matrices(st)
        d = st.m2 - st.m1 * st.m1
        sd = np.sqrt(np.maximum(d, 0.0))
        l3w = lam3 * sd * d          # lambda3 * d^{3/2}
        l4w = lam4 * d * d

        np.add.at(v1[r], grp, st.m1)
        np.add.at(Tg[r], grp, d)
        np.add.at(s3g[r], grp, l3w)
        np.add.at(s4g[r], grp, l4w)

        # residualised covariates Xw = (I - Z M^{-1} Z') X
        gsum = np.zeros((G, K))
        np.add.at(gsum, grp, block.X)
        Xw = block.X - (gsum * mi[:, None])[grp]
        B_bb += -(block.X.T @ block.X) + (Xw * d[:, None]).T @ Xw

        np.add.at(Cd[r], grp, Xw * d[:, None])
        np.add.at(C3[r], grp, Xw * l3w[:, None])

    # alpha vectors: (K^{gh} v1)_a stacked over regions; support is {g, h}
    def alpha(p):
        g, h = p
        if g == h:
            return {g: v1[:, g] * minv[:, g] ** 2}
        c = minv[:, g] * minv[:, h]
        return {g: v1[:, h] * c, h: v1[:, g] * c}

    alphas = [alpha(p) for p in pairs]

    # beta x phi block
    B_bphi = np.zeros((K, P))
    for ip, (g, h) in enumerate(pairs):
        a = alphas[ip]
        col = np.zeros(K)
        for grpidx, av in a.items():
            col += 2.0 * np.einsum("r,rk->k", av, Cd[:, grpidx, :])
        if g == h:
            col += np.einsum("r,rk->k", minv[:, g] ** 2, C3[:, g, :])
        B_bphi[:, ip] = -0.5 * col

    # phi x phi block: prior curvature plus score covariance
    W = params.sigma_G
    B_phiphi = np.zeros((P, P))
    jmats = []
    for g, h in pairs:
        J = np.zeros((G, G))
        J[g, h] = 1.0
        J[h, g] = 1.0
        jmats.append(J)
    WJW = [W @ J @ W for J in jmats]
    for ip in range(P):
        for iq in range(ip, P):
            prior = -0.5 * R * float(np.sum(WJW[ip] * jmats[iq]))
            g, h = pairs[ip]
            k, l = pairs[iq]
            ap, aq = alphas[ip], alphas[iq]
            data = np.zeros(R)
            # tr(Sigma A^q Sigma A^p): supports must coincide
            if (g, h) == (k, l):
                if g == h:
                    data += 2.0 * Tg[:, g] ** 2 * minv[:, g] ** 4
                else:
                    c2 = (minv[:, g] * minv[:, h]) ** 2
                    data += 4.0 * Tg[:, g] * Tg[:, h] * c2
            # kurtosis term: both pairs diagonal and equal group
            if g == h and k == l and g == k:
                data += s4g[:, g] * minv[:, g] ** 4
            # skew couplings (nonzero only for diagonal pairs)
            if g == h and g in aq:
                data += 2.0 * s3g[:, g] * minv[:, g] ** 2 * aq[g]
            if k == l and k in ap:
                data += 2.0 * s3g[:, k] * minv[:, k] ** 2 * ap[k]
            # quadratic coupling sum_a T_a alpha^p_a alpha^q_a
            for a_idx, av in ap.items():
                if a_idx in aq:
                    data += 4.0 * Tg[:, a_idx] * av * aq[a_idx]
            val = prior + 0.25 * float(np.sum(data))
            B_phiphi[ip, iq] = val
            B_phiphi[iq, ip] = val

    assembled = np.zeros((K + P, K + P))
    assembled[:K, :K] = 0.5 * (B_bb + B_bb.T)
    assembled[:K, K:] = B_bphi
    assembled[K:, :K] = B_bphi.T
    assembled[K:, K:] = B_phiphi
    names = [f"beta[{j}]" for j in range(K)] + [f"phi[{g},{h}]" for g, h in pairs]
    return InfoBlocks(
        B_bb=0.5 * (B_bb + B_bb.T),
        B_bphi=B_bphi,
        B_phiphi=B_phiphi,
        assembled=assembled,
        param_names=names,
    )


def standard_errors(info: InfoBlocks) -> np.ndarray:
    """Asymptotic standard errors sqrt(diag((-B)^{-1})).

    Raises when -B is not positive definite, naming the smallest
    eigenvalue and whether the coefficient or precision block drives it
    (usually a sign of non-convergence or a boundary estimate).
    """
    neg = -info.assembled
    K = info.B_bb.shape[0]
    try:
        c, low = linalg.cho_factor(neg, lower=True)
    except linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(neg)
        vec = evecs[:, 0]
        block = "beta" if float(np.sum(vec[:K] ** 2)) >= 0.5 else "phi"
        raise np.linalg.LinAlgError(
            f"negative information is not positive definite "
            f"(smallest eigenvalue {evals[0]:.3e}, dominated by the {block} "
            "block); the fit may not have converged or sits on a boundary"
        ) from None
    cov = linalg.cho_solve((c, low), np.eye(neg.shape[0]))
    return np.sqrt(np.diag(cov))
