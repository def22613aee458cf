# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: mean-field Gauss-Seidel sweeps and the Gibbs chain.

Mirrors the contracts of ``_kernels_py`` exactly; see that module for the
definitions.  Scalar truncated-normal pieces are inlined so a sweep over
one observation costs a handful of flops plus one erfcx/ndtr evaluation.
"""

from libc.math cimport exp, fabs, fmax, log, log1p, sqrt

from scipy.special.cython_special cimport erfcx, log_ndtr, ndtr, ndtri_exp

BACKEND_NAME = "compiled"

cdef double SQRT2 = 1.4142135623730951
cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double SQRT_2_OVER_PI = 0.7978845608028654


cdef inline double _hazard(double x) noexcept nogil:
    if x > 0.0:
        return SQRT_2_OVER_PI / erfcx(x / SQRT2)
    return exp(-0.5 * x * x) * INV_SQRT_2PI / ndtr(-x)


cdef inline int _sweep_onehot(
    double[::1] eta, signed char[::1] y, long[::1] grp,
    double[:, ::1] pinv,
    double[::1] m1, double[::1] m2,
    double[::1] lc2, double[::1] lc3, double[::1] lc4,
    double[::1] v, double[::1] tdiag,
    int max_sweeps, double tol, double* out_maxd) noexcept nogil:
    cdef int n = eta.shape[0]
    cdef int G = pinv.shape[0]
    cdef int s, i, h, sweeps = 0
    cdef long g
    cdef double qv, qtq, pzz, st2, sig, m1o, do, a, corr, mu, xi
    cdef double r1, r2, rr, c2, c3, c4, m1n, m2n, d, maxd = 0.0
    for s in range(max_sweeps):
        maxd = 0.0
        for i in range(n):
            g = grp[i]
            qv = 0.0
            qtq = 0.0
            for h in range(G):
                qv += pinv[g, h] * v[h]
                qtq += pinv[g, h] * pinv[g, h] * tdiag[h]
            pzz = pinv[g, g]
            st2 = 1.0 / (1.0 - pzz)
            sig = sqrt(st2)
            m1o = m1[i]
            do = m2[i] - m1o * m1o
            a = st2 * (qv - pzz * m1o)
            corr = st2 * st2 * (qtq - do * pzz * pzz)
            mu = eta[i] + a
            xi = -mu / sig
            if y[i] == 1:
                r1 = _hazard(xi)
            else:
                r1 = -_hazard(-xi)
            r2 = xi * r1
            rr = r1 * r1
            c2 = 1.0 + xi * r1 - rr
            c3 = r1 * (xi * xi - 1.0 - 3.0 * xi * r1 + 2.0 * rr)
            c4 = (3.0 + 3.0 * xi * r1 + xi * xi * xi * r1 - 2.0 * rr
                  - 4.0 * xi * xi * rr + 6.0 * xi * r1 * rr - 3.0 * rr * rr)
            m1n = a + r1 * sig
            m2n = a * a + st2 + 2.0 * r1 * sig * a + r2 * st2 + corr
            lc2[i] = st2 * c2
            lc3[i] = st2 * sig * c3
            lc4[i] = st2 * st2 * c4
            d = fabs(m1n - m1o)
            if d > maxd:
                maxd = d
            m1[i] = m1n
            m2[i] = m2n
            v[g] += m1n - m1o
            tdiag[g] += (m2n - m1n * m1n) - do
        sweeps = s + 1
        if maxd < tol:
            break
    out_maxd[0] = maxd
    return sweeps


def sweep_onehot(double[::1] eta, signed char[::1] y, long[::1] grp,
                 double[:, ::1] pinv,
                 double[::1] m1, double[::1] m2,
                 double[::1] lc2, double[::1] lc3, double[::1] lc4,
                 double[::1] v, double[::1] tdiag,
                 int max_sweeps, double tol):
    cdef double maxd = 0.0
    cdef int sweeps
    with nogil:
        sweeps = _sweep_onehot(eta, y, grp, pinv, m1, m2, lc2, lc3, lc4,
                               v, tdiag, max_sweeps, tol, &maxd)
    return sweeps, maxd


def sweep_onehot_all(double[::1] eta, signed char[::1] y, long[::1] grp,
                     long[::1] offsets, double[:, :, ::1] pinv_all,
                     double[::1] m1, double[::1] m2,
                     double[::1] lc2, double[::1] lc3, double[::1] lc4,
                     double[:, ::1] v_all, double[:, ::1] tdiag_all,
                     int max_sweeps, double tol):
    cdef int r, s, worst = 0
    cdef long lo, hi
    cdef double maxd = 0.0
    with nogil:
        for r in range(offsets.shape[0] - 1):
            lo = offsets[r]
            hi = offsets[r + 1]
            s = _sweep_onehot(eta[lo:hi], y[lo:hi], grp[lo:hi], pinv_all[r],
                              m1[lo:hi], m2[lo:hi], lc2[lo:hi], lc3[lo:hi],
                              lc4[lo:hi], v_all[r], tdiag_all[r],
                              max_sweeps, tol, &maxd)
            if s > worst:
                worst = s
    return worst


def sweep_dense(double[::1] eta, signed char[::1] y,
                double[:, ::1] Z, double[:, ::1] ZP,
                double[::1] m1, double[::1] m2,
                double[::1] lc2, double[::1] lc3, double[::1] lc4,
                double[::1] v, double[:, ::1] T,
                int max_sweeps, double tol):
    cdef int n = eta.shape[0]
    cdef int G = Z.shape[1]
    cdef int s, i, h, k, sweeps = 0
    cdef double qv, qtq, pzz, st2, sig, m1o, do, a, corr, mu, xi, qt
    cdef double r1, r2, rr, c2, c3, c4, m1n, m2n, d, dd, maxd = 0.0
    with nogil:
        for s in range(max_sweeps):
            maxd = 0.0
            for i in range(n):
                qv = 0.0
                pzz = 0.0
                qtq = 0.0
                for h in range(G):
                    qv += ZP[i, h] * v[h]
                    pzz += ZP[i, h] * Z[i, h]
                    qt = 0.0
                    for k in range(G):
                        qt += T[h, k] * ZP[i, k]
                    qtq += ZP[i, h] * qt
                st2 = 1.0 / (1.0 - pzz)
                sig = sqrt(st2)
                m1o = m1[i]
                do = m2[i] - m1o * m1o
                a = st2 * (qv - pzz * m1o)
                corr = st2 * st2 * (qtq - do * pzz * pzz)
                mu = eta[i] + a
                xi = -mu / sig
                if y[i] == 1:
                    r1 = _hazard(xi)
                else:
                    r1 = -_hazard(-xi)
                r2 = xi * r1
                rr = r1 * r1
                c2 = 1.0 + xi * r1 - rr
                c3 = r1 * (xi * xi - 1.0 - 3.0 * xi * r1 + 2.0 * rr)
                c4 = (3.0 + 3.0 * xi * r1 + xi * xi * xi * r1 - 2.0 * rr
                      - 4.0 * xi * xi * rr + 6.0 * xi * r1 * rr - 3.0 * rr * rr)
                m1n = a + r1 * sig
                m2n = a * a + st2 + 2.0 * r1 * sig * a + r2 * st2 + corr
                lc2[i] = st2 * c2
                lc3[i] = st2 * sig * c3
                lc4[i] = st2 * st2 * c4
                d = fabs(m1n - m1o)
                if d > maxd:
                    maxd = d
                dd = (m2n - m1n * m1n) - do
                for h in range(G):
                    v[h] += (m1n - m1o) * Z[i, h]
                    for k in range(G):
                        T[h, k] += dd * Z[i, h] * Z[i, k]
                m1[i] = m1n
                m2[i] = m2n
            sweeps = s + 1
            if maxd < tol:
                break
    return sweeps, maxd


def gibbs_chain(double[::1] eta, signed char[::1] y,
                double[:, ::1] Z, double[:, ::1] ZP,
                double[::1] w, double[::1] v,
                double[:, ::1] uniforms, double[:, ::1] out,
                int burn, int thin):
    cdef int n = eta.shape[0]
    cdef int G = Z.shape[1]
    cdef int n_keep = out.shape[0]
    cdef int total = burn + n_keep * thin
    cdef int t, i, h, idx
    cdef double qv, pzz, st2, sig, a, b, u, zeta, wn
    with nogil:
        for t in range(total):
            for i in range(n):
                qv = 0.0
                pzz = 0.0
                for h in range(G):
                    qv += ZP[i, h] * v[h]
                    pzz += ZP[i, h] * Z[i, h]
                st2 = 1.0 / (1.0 - pzz)
                sig = sqrt(st2)
                a = st2 * (qv - pzz * w[i])
                b = (-eta[i] - a) / sig
                u = fmax(uniforms[t, i], 1e-300)
                if y[i] == 1:
                    zeta = -ndtri_exp(log1p(-u) + log_ndtr(-b))
                else:
                    zeta = ndtri_exp(log(u) + log_ndtr(b))
                wn = a + sig * zeta
                for h in range(G):
                    v[h] += (wn - w[i]) * Z[i, h]
                w[i] = wn
            if t >= burn and (t - burn) % thin == 0:
                idx = (t - burn) // thin
                for i in range(n):
                    out[idx, i] = w[i]
