"""Pure-Python fallback for the hot kernels.

Same contracts as the compiled extension in ``_kernels.pyx``: the
Gauss-Seidel mean-field sweep (one-hot and dense-loading variants), the
fused all-region one-hot sweep, and the single-site Gibbs chain for the
latent variables.  Used when the extension is unavailable or when
``GPROBIT_BACKEND=python`` forces it; everything is plain loops over
scalar special-function calls, so it is an order of magnitude slower
but numerically equivalent.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

BACKEND_NAME = "python"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _hazard(x):
    if x > 0.0:
        return _SQRT_2_OVER_PI / special.erfcx(x / _SQRT2)
    return math.exp(-0.5 * x * x) * _INV_SQRT_2PI / special.ndtr(-x)


def _site_update(a, st2, eta_i, yi):
    # Truncated-normal moments of one site given plug-in mean offset a
    # and leave-one-out variance st2; returns centred m1/m2 pieces plus
    # the central moments kept for the information matrix.
    sig = math.sqrt(st2)
    xi = -(eta_i + a) / sig
    if yi == 1:
        r1 = _hazard(xi)
    else:
        r1 = -_hazard(-xi)
    r2 = xi * r1
    rr = r1 * r1
    c2 = 1.0 + xi * r1 - rr
    c3 = r1 * (xi * xi - 1.0 - 3.0 * xi * r1 + 2.0 * rr)
    c4 = (
        3.0
        + 3.0 * xi * r1
        + xi * xi * xi * r1
        - 2.0 * rr
        - 4.0 * xi * xi * rr
        + 6.0 * xi * r1 * rr
        - 3.0 * rr * rr
    )
    m1n = a + r1 * sig
    m2_smooth = a * a + st2 + 2.0 * r1 * sig * a + r2 * st2
    return m1n, m2_smooth, st2 * c2, st2 * sig * c3, st2 * st2 * c4


def sweep_onehot(eta, y, grp, pinv, m1, m2, lc2, lc3, lc4, v, tdiag,
                 max_sweeps, tol):
    """Gauss-Seidel sweeps over one one-hot region; state arrays in place.

    ``v`` accumulates the group sums of m1 and ``tdiag`` the group sums
    of m2 - m1^2; both are kept consistent during the sweep.
    Returns (sweeps run, last max |delta m1|).
    """
    n = eta.shape[0]
    sweeps = 0
    maxd = math.inf
    for _ in range(max_sweeps):
        maxd = 0.0
        for i in range(n):
            g = grp[i]
            row = pinv[g]
            qv = float(row @ v)
            qtq = float((row * row) @ tdiag)
            pzz = row[g]
            st2 = 1.0 / (1.0 - pzz)
            m1o = m1[i]
            do = m2[i] - m1o * m1o
            a = st2 * (qv - pzz * m1o)
            corr = st2 * st2 * (qtq - do * pzz * pzz)
            m1n, m2_smooth, l2, l3, l4 = _site_update(a, st2, eta[i], y[i])
            m2n = m2_smooth + corr
            lc2[i] = l2
            lc3[i] = l3
            lc4[i] = l4
            d = abs(m1n - m1o)
            if d > maxd:
                maxd = d
            m1[i] = m1n
            m2[i] = m2n
            v[g] += m1n - m1o
            tdiag[g] += (m2n - m1n * m1n) - do
        sweeps += 1
        if maxd < tol:
            break
    return sweeps, maxd


def sweep_onehot_all(eta, y, grp, offsets, pinv_all, m1, m2, lc2, lc3, lc4,
                     v_all, tdiag_all, max_sweeps, tol):
    """Fused sweep over all regions of a flat one-hot layout.

    ``offsets`` has length R+1; region r owns slice offsets[r]:offsets[r+1]
    of the observation arrays and row r of the (R, G) group accumulators.
    ``pinv_all`` is (R, G, G).  Returns the max sweep count used.
    """
    worst = 0
    for r in range(offsets.shape[0] - 1):
        lo, hi = offsets[r], offsets[r + 1]
        s, _ = sweep_onehot(
            eta[lo:hi], y[lo:hi], grp[lo:hi], pinv_all[r],
            m1[lo:hi], m2[lo:hi], lc2[lo:hi], lc3[lo:hi], lc4[lo:hi],
            v_all[r], tdiag_all[r], max_sweeps, tol,
        )
        worst = max(worst, s)
    return worst


def sweep_dense(eta, y, Z, ZP, m1, m2, lc2, lc3, lc4, v, T, max_sweeps, tol):
    """Dense-loading variant of the sweep; ``ZP`` caches Z P^{-1} rows and
    ``T`` is the full G x G accumulator of sum_j d_j z_j z_j'."""
    n = eta.shape[0]
    sweeps = 0
    maxd = math.inf
    for _ in range(max_sweeps):
        maxd = 0.0
        for i in range(n):
            z = Z[i]
            q = ZP[i]
            qv = float(q @ v)
            pzz = float(q @ z)
            qtq = float(q @ T @ q)
            st2 = 1.0 / (1.0 - pzz)
            m1o = m1[i]
            do = m2[i] - m1o * m1o
            a = st2 * (qv - pzz * m1o)
            corr = st2 * st2 * (qtq - do * pzz * pzz)
            m1n, m2_smooth, l2, l3, l4 = _site_update(a, st2, eta[i], y[i])
            m2n = m2_smooth + corr
            lc2[i] = l2
            lc3[i] = l3
            lc4[i] = l4
            d = abs(m1n - m1o)
            if d > maxd:
                maxd = d
            v += (m1n - m1o) * z
            T += ((m2n - m1n * m1n) - do) * np.outer(z, z)
            m1[i] = m1n
            m2[i] = m2n
        sweeps += 1
        if maxd < tol:
            break
    return sweeps, maxd


def gibbs_chain(eta, y, Z, ZP, w, v, uniforms, out, burn, thin):
    """Single-site Gibbs chain for the centred latents of one region.

    Each site is redrawn from its exact truncated-normal full conditional
    by inverse CDF in log space (tail stable: the quantile is evaluated
    through ndtri_exp, never through 1 - Phi).  ``uniforms`` supplies one
    variate per site per scan, ``out`` receives the retained scans.
    """
    n = eta.shape[0]
    n_keep = out.shape[0]
    total = burn + n_keep * thin
    for t in range(total):
        u_row = uniforms[t]
        for i in range(n):
            z = Z[i]
            q = ZP[i]
            pzz = float(q @ z)
            st2 = 1.0 / (1.0 - pzz)
            a = st2 * (float(q @ v) - pzz * w[i])
            sig = math.sqrt(st2)
            b = (-eta[i] - a) / sig
            u = max(u_row[i], 1e-300)
            if y[i] == 1:
                zeta = -special.ndtri_exp(math.log1p(-u) + special.log_ndtr(-b))
            else:
                zeta = special.ndtri_exp(math.log(u) + special.log_ndtr(b))
            wn = a + sig * zeta
            v += (wn - w[i]) * z
            w[i] = wn
        if t >= burn and (t - burn) % thin == 0:
            out[(t - burn) // thin] = w
