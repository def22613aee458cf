"""Univariate truncated-normal moment kernels.

The latent-response model only ever truncates a normal on one side of
zero: observing a positive outcome restricts the latent variable to
(0, inf) and a zero outcome to (-inf, 0).  Everything here is written
for that one-sided case, with a single standardised truncation point
``xi = -mu / sigma``.  The Mills-ratio terms are evaluated through the
scaled complementary error function so that moments stay finite and
accurate far into the tails (|xi| of 40 and beyond), where the naive
phi/Phi quotient underflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "TruncMoments",
    "truncation_bounds",
    "mills_terms",
    "trunc_moments",
    "trunc_moments_vec",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class TruncMoments:
    """First/second raw moments, central moments and Mills terms of a
    one-sided truncated normal."""

    lambda1: float  # E[T]
    lambda2: float  # E[T^2]
    l2c: float      # Var[T]
    l3c: float      # E[(T - E T)^3]
    l4c: float      # E[(T - E T)^4]
    rho1: float
    rho2: float


def truncation_bounds(y: int) -> tuple[float, float]:
    """Truncation interval of the latent variable implied by outcome ``y``.

    A unit outcome means the latent variable landed in (0, inf); a zero
    outcome means (-inf, 0).
    """
    if y == 1:
        return (0.0, math.inf)
    if y == 0:
        return (-math.inf, 0.0)
    raise ValueError(f"outcome must be 0 or 1, got {y!r}")


def _hazard(x: float) -> float:
    # phi(x) / (1 - Phi(x)); erfcx keeps the ratio accurate for large x,
    # the direct quotient is safe for x <= 0 where 1 - Phi(x) >= 1/2.
    if x > 0.0:
        return _SQRT_2_OVER_PI / special.erfcx(x / _SQRT2)
    return math.exp(-0.5 * x * x) * _INV_SQRT_2PI / special.ndtr(-x)


def _hazard_vec(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x > 0.0
    out[pos] = _SQRT_2_OVER_PI / special.erfcx(x[pos] / _SQRT2)
    xn = x[~pos]
    out[~pos] = np.exp(-0.5 * xn * xn) * _INV_SQRT_2PI / special.ndtr(-xn)
    return out


def mills_terms(mu: float, sigma: float, y: int) -> tuple[float, float]:
    """Mills-ratio correction terms (rho1, rho2) for the truncated normal.

    With ``xi_j = (t_j - mu) / sigma`` for the truncation bounds
    ``(t1, t2)`` of :func:`truncation_bounds`,

        rho1 = (phi(xi1) - phi(xi2)) / (Phi(xi2) - Phi(xi1))
        rho2 = (xi1 phi(xi1) - xi2 phi(xi2)) / (Phi(xi2) - Phi(xi1))

    under the convention ``xi phi(xi) -> 0`` as ``|xi| -> inf``.  Because
    only one bound is finite, both reduce to hazard-function expressions
    in the single standardised point ``xi = -mu / sigma``.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xi = -mu / sigma
    if y == 1:
        rho1 = _hazard(xi)
    elif y == 0:
        rho1 = -_hazard(-xi)
    else:
        raise ValueError(f"outcome must be 0 or 1, got {y!r}")
    return rho1, xi * rho1


def _central_std(xi: float, rho1: float) -> tuple[float, float, float]:
    # Central moments of a standard normal truncated at xi (one side).
    # Derived from the raw-moment recursion E[W^k] = (k-1) E[W^(k-2)]
    # + xi^(k-1) rho1; the infinite bound contributes nothing.
    r2 = rho1 * rho1
    c2 = 1.0 + xi * rho1 - r2
    c3 = rho1 * (xi * xi - 1.0 - 3.0 * xi * rho1 + 2.0 * r2)
    c4 = (
        3.0
        + 3.0 * xi * rho1
        + xi * xi * xi * rho1
        - 2.0 * r2
        - 4.0 * xi * xi * r2
        + 6.0 * xi * rho1 * r2
        - 3.0 * r2 * r2
    )
    return c2, c3, c4


def trunc_moments(mu: float, sigma: float, y: int) -> TruncMoments:
    """Moments of a N(mu, sigma^2) variable truncated to the side of zero
    implied by the binary outcome ``y``.

    Returns the first and second raw moments together with the second,
    third and fourth central moments.  All five are assembled from the
    standardised central moments, which avoids the catastrophic
    cancellation the raw-moment formulas suffer deep in the tails.
    """
    rho1, rho2 = mills_terms(mu, sigma, y)
    xi = -mu / sigma
    c2, c3, c4 = _central_std(xi, rho1)
    s2 = sigma * sigma
    lambda1 = mu + sigma * rho1
    l2c = s2 * c2
    l3c = s2 * sigma * c3
    l4c = s2 * s2 * c4
    lambda2 = lambda1 * lambda1 + l2c
    return TruncMoments(lambda1, lambda2, l2c, l3c, l4c, rho1, rho2)


def trunc_moments_vec(mu: np.ndarray, sigma: np.ndarray, y: np.ndarray):
    """Vectorised (lambda1, l2c) for arrays of means, scales and outcomes.

    Used by the independent-probit initialisation where only the mean and
    variance of each truncated latent are needed.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y)
    xi = -mu / sigma
    rho1 = np.where(y == 1, _hazard_vec(xi), -_hazard_vec(-xi))
    c2 = 1.0 + xi * rho1 - rho1 * rho1
    return mu + sigma * rho1, sigma * sigma * c2
