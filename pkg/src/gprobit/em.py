"""Outer EM loops: maximum-likelihood and penalised fitting, the
Q-function, penalty-path selection by Q-based BIC, and prediction.

Convergence is declared on the parameters (max absolute change below
``outer_tol``) rather than on the Q-function: the approximate E-step can
make Q dip slightly, which is monitored and warned about but is not an
error.  The E-step is a map over regions; worker count never changes the
result because every region is computed independently and reductions run
in region order.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from .estep import EStepState, estep_region
from .model import Dataset, ModelParams, RegionBlock
from .mstep import GlassoConfig, glasso, update_beta, update_phi_diagonal, update_phi_ml
from .truncnorm import trunc_moments_vec

__all__ = [
    "EMConfig",
    "FitResult",
    "PathResult",
    "FeasibilityError",
    "DivergenceError",
    "q_function",
    "fit_ml",
    "fit_penalized",
    "fit_probit",
    "independent_probit_fit",
    "predict",
    "marginal_probability",
    "default_rho_grid",
]


class FeasibilityError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, msg, q_trajectory=None):
        super().__init__(msg)
        self.q_trajectory = q_trajectory


@dataclass
class EMConfig:
    max_outer: int = 500
    outer_tol: float = 1e-5
    inner_sweeps: int = 1
    inner_tol: float = 1e-6
    moment_map: str = "auto"   # auto | exact | group_average
    seed: int = 0
    threads: int = 1
    backend: str | None = None

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")
        if self.moment_map not in ("auto", "exact", "group_average"):
            raise ValueError(f"unknown moment map {self.moment_map!r}")

    def resolve_moment_map(self, dataset: Dataset) -> str:
        if self.moment_map != "auto":
            return self.moment_map
        mean_n = dataset.n_obs / dataset.n_regions
        if dataset.is_onehot and mean_n > 200:
            return "group_average"
        return "exact"


@dataclass
class FitResult:
    params: ModelParams
    q_trajectory: np.ndarray
    outer_iters: int
    converged: bool
    wall_time: float
    moment_map_used: str
    estimator: str = "graphical"
    se: dict | None = None
    q_decreases: int = 0
    penalty_rho: float | None = None
    last_delta: float = float("nan")
    states: list = field(default=None, repr=False)


@dataclass
class PathResult:
    rho_grid: np.ndarray        # strictly decreasing
    fits: list
    bic: np.ndarray
    selected_index: int

    def __post_init__(self):
        if not np.all(np.diff(self.rho_grid) < 0):
            raise ValueError("rho grid must be strictly decreasing")

    @property
    def selected(self) -> FitResult:
        return self.fits[self.selected_index]


def _region_gram_trace(block: RegionBlock, Euu: np.ndarray) -> float:
    # tr(Z'Z Euu), exploiting one-hot structure when present
    if block.is_onehot:
        counts = np.bincount(block.group_index, minlength=block.n_groups)
        return float(np.dot(counts.astype(float), np.diagonal(Euu)))
    Z = block.Z
    return float(np.sum((Z.T @ Z) * Euu))


def q_function(dataset: Dataset, params: ModelParams, states) -> float:
    """Expected complete-data log-likelihood given the E-step moments.

    (R/2) log|Phi| - (1/2) tr(Phi sum_r E(uu'|y)) - (1/2) sum_r
    E[||y* - X b - Z u||^2 | y], with the residual term expanded through
    the stored m1, m2, cross and Euu summaries.
    """
    try:
        c = np.linalg.cholesky(params.phi_G)
    except np.linalg.LinAlgError:
        raise ValueError("phi_G must be positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    r = dataset.n_regions
    sum_euu = np.zeros_like(params.phi_G)
    resid = 0.0
    for block, st in zip(dataset.regions, states):
        sum_euu += st.Euu
        resid += float(np.sum(st.m2)) - 2.0 * st.cross + _region_gram_trace(block, st.Euu)
    return 0.5 * r * logdet - 0.5 * float(np.sum(params.phi_G * sum_euu)) - 0.5 * resid


def independent_probit_fit(dataset: Dataset, tol: float = 1e-9,
                           max_iter: int = 500) -> np.ndarray:
    """Probit coefficients ignoring the random effects, by EM.

    Each iteration replaces the latent variable with its truncated-normal
    mean at the current linear predictor and re-solves the normal
    equations; the fixed point is the probit maximum likelihood estimate.
    """
    X = np.vstack([b.X for b in dataset.regions])
    y = np.concatenate([b.y for b in dataset.regions])
    xtx = dataset.xtx()
    c, low = linalg.cho_factor(xtx, lower=True)
    beta = np.zeros(X.shape[1])
    ones = np.ones(X.shape[0])
    for _ in range(max_iter):
        eta = X @ beta
        lam1, _ = trunc_moments_vec(eta, ones, y)
        new = linalg.cho_solve((c, low), X.T @ lam1)
        delta = float(np.max(np.abs(new - beta)))
        beta = new
        if delta < tol:
            break
    return beta


def _estep_all(dataset, params, config, moment_map, states, pinv_cache=None):
    cfg = replace(config, moment_map=moment_map)
    blocks = dataset.regions
    prev = states if states is not None else [None] * len(blocks)

    def one(idx):
        return estep_region(blocks[idx], params, cfg, state=prev[idx],
                            backend=config.backend)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(one, range(len(blocks))))
    return [one(i) for i in range(len(blocks))]


def _check_finite(params, q_trajectory, iteration):
    if not (np.all(np.isfinite(params.beta)) and np.all(np.isfinite(params.phi_G))):
        raise DivergenceError(
            f"parameters diverged at outer iteration {iteration}",
            q_trajectory=np.asarray(q_trajectory),
        )


def _em_loop(dataset, config, phi_step, moment_map, estimator, rho=None):
    start = time.perf_counter()
    beta = independent_probit_fit(dataset)
    params = ModelParams.from_precision(beta, np.eye(dataset.n_groups))
    states = None
    q_traj = []
    q_decreases = 0
    converged = False
    delta = float("nan")
    iters = 0
    for m in range(config.max_outer):
        iters = m + 1
        states = _estep_all(dataset, params, config, moment_map, states)
        s_bar = np.zeros((dataset.n_groups, dataset.n_groups))
        for st in states:
            s_bar += st.Euu
        s_bar /= dataset.n_regions
        phi_new = phi_step(s_bar, params.phi_G)
        beta_new = update_beta(dataset, states, params.beta)
        delta = max(
            float(np.max(np.abs(beta_new - params.beta))),
            float(np.max(np.abs(phi_new - params.phi_G))),
        )
        params = ModelParams.from_precision(beta_new, phi_new)
        _check_finite(params, q_traj, iters)
        q = q_function(dataset, params, states)
        if q_traj and q < q_traj[-1] - 1e-10:
            q_decreases += 1
            if q_decreases == 1:
                warnings.warn(
                    f"Q-function decreased at outer iteration {iters} "
                    "(expected occasionally under the mean-field E-step)",
                    RuntimeWarning,
                    stacklevel=3,
                )
        q_traj.append(q)
        if delta < config.outer_tol:
            converged = True
            break
    return FitResult(
        params=params,
        q_trajectory=np.asarray(q_traj),
        outer_iters=iters,
        converged=converged,
        wall_time=time.perf_counter() - start,
        moment_map_used=moment_map,
        estimator=estimator,
        q_decreases=q_decreases,
        penalty_rho=rho,
        last_delta=delta,
        states=states,
    )


def fit_ml(dataset: Dataset, config: EMConfig | None = None,
           precision: str = "full") -> FitResult:
    """Maximum-likelihood EM fit.

    ``precision='full'`` estimates the unconstrained group precision
    (needs more regions than groups); ``'diagonal'`` constrains the
    random effects to be uncorrelated.
    """
    config = config or EMConfig()
    moment_map = config.resolve_moment_map(dataset)
    if precision == "full":
        if dataset.n_regions <= dataset.n_groups:
            raise FeasibilityError(
                f"unpenalised precision estimation needs more regions than "
                f"groups (R={dataset.n_regions} <= G={dataset.n_groups}); "
                "use the penalised fit"
            )
        step = lambda s_bar, phi_old: update_phi_ml(s_bar)
        estimator = "graphical"
    elif precision == "diagonal":
        step = lambda s_bar, phi_old: update_phi_diagonal(s_bar)
        estimator = "diagonal"
    else:
        raise ValueError(f"unknown precision mode {precision!r}")
    return _em_loop(dataset, config, step, moment_map, estimator)


def fit_probit(dataset: Dataset, config: EMConfig | None = None) -> FitResult:
    """Plain probit fit (random effects ignored), packaged like the others.

    The returned params carry an identity precision purely as a
    placeholder; prediction for this estimator uses the linear predictor
    alone.
    """
    start = time.perf_counter()
    beta = independent_probit_fit(dataset)
    params = ModelParams.from_precision(beta, np.eye(dataset.n_groups))
    return FitResult(
        params=params,
        q_trajectory=np.zeros(0),
        outer_iters=0,
        converged=True,
        wall_time=time.perf_counter() - start,
        moment_map_used="none",
        estimator="probit",
    )


def fit_penalized_single(dataset: Dataset, rho: float,
                         config: EMConfig | None = None,
                         glasso_config: GlassoConfig | None = None) -> FitResult:
    """Penalised EM fit at one fixed penalty."""
    config = config or EMConfig()
    moment_map = config.resolve_moment_map(dataset)
    gcfg = glasso_config or GlassoConfig()

    def step(s_bar, phi_old):
        return glasso(s_bar, rho, n_regions=dataset.n_regions,
                      config=gcfg, phi_init=phi_old).phi

    out = _em_loop(dataset, config, step, moment_map, "penalized", rho=rho)
    return out


def default_rho_grid(s_bar0: np.ndarray, n_regions: int, n_points: int = 20,
                     min_ratio: float = 0.01) -> np.ndarray:
    """Log-spaced decreasing penalty grid from the full-shrinkage point.

    rho_max is the smallest penalty whose solution is diagonal, read off
    the largest off-diagonal of the first iteration's averaged second
    moment.
    """
    off = np.abs(s_bar0 - np.diag(np.diag(s_bar0)))
    m = float(off.max())
    if m <= 0:
        m = 1e-3
    rho_max = 0.5 * n_regions * m
    return np.geomspace(rho_max, rho_max * min_ratio, n_points)


def fit_penalized(dataset: Dataset, config: EMConfig | None = None,
                  rho_grid=None, n_points: int = 20,
                  glasso_config: GlassoConfig | None = None) -> PathResult:
    """Penalised path fit with warm starts and Q-based BIC selection.

    The grid must be strictly decreasing (default: 20 log-spaced points
    from the full-shrinkage penalty down two decades).  BIC(rho) =
    -2 Q(theta_rho) + df ln(R) with df = K + G + number of nonzero
    upper-triangle off-diagonals; ties select the sparser (larger rho)
    model.
    """
    config = config or EMConfig()
    moment_map = config.resolve_moment_map(dataset)
    gcfg = glasso_config or GlassoConfig()
    R = dataset.n_regions
    K = dataset.n_covariates
    G = dataset.n_groups

    beta0 = independent_probit_fit(dataset)
    params = ModelParams.from_precision(beta0, np.eye(G))
    states = _estep_all(dataset, params, config, moment_map, None)
    s_bar0 = np.zeros((G, G))
    for st in states:
        s_bar0 += st.Euu
    s_bar0 /= R

    if rho_grid is None:
        rho_grid = default_rho_grid(s_bar0, R, n_points)
    rho_grid = np.asarray(rho_grid, dtype=float)
    if rho_grid.ndim != 1 or rho_grid.size == 0 or np.any(rho_grid <= 0):
        raise ValueError("rho grid must be non-empty and positive")
    if rho_grid.size > 1 and not np.all(np.diff(rho_grid) < 0):
        raise ValueError("rho grid must be strictly decreasing")

    fits = []
    bics = []
    start_time = time.perf_counter()
    for rho in rho_grid:
        q_traj = []
        q_decreases = 0
        converged = False
        delta = float("nan")
        iters = 0
        t0 = time.perf_counter()
        for m in range(config.max_outer):
            iters = m + 1
            if m > 0 or fits:
                states = _estep_all(dataset, params, config, moment_map, states)
            s_bar = np.zeros((G, G))
            for st in states:
                s_bar += st.Euu
            s_bar /= R
            phi_new = glasso(s_bar, float(rho), n_regions=R, config=gcfg,
                             phi_init=params.phi_G).phi
            beta_new = update_beta(dataset, states, params.beta)
            delta = max(
                float(np.max(np.abs(beta_new - params.beta))),
                float(np.max(np.abs(phi_new - params.phi_G))),
            )
            params = ModelParams.from_precision(beta_new, phi_new)
            _check_finite(params, q_traj, iters)
            q = q_function(dataset, params, states)
            if q_traj and q < q_traj[-1] - 1e-10:
                q_decreases += 1
            q_traj.append(q)
            if delta < config.outer_tol:
                converged = True
                break
        nnz = int(np.sum(np.abs(np.triu(params.phi_G, k=1)) > 1e-8))
        df = K + G + nnz
        bic = -2.0 * q_traj[-1] + df * np.log(R)
        fits.append(FitResult(
            params=params,
            q_trajectory=np.asarray(q_traj),
            outer_iters=iters,
            converged=converged,
            wall_time=time.perf_counter() - t0,
            moment_map_used=moment_map,
            estimator="penalized",
            q_decreases=q_decreases,
            penalty_rho=float(rho),
            last_delta=delta,
            states=states,
        ))
        bics.append(bic)
    _ = time.perf_counter() - start_time
    bics = np.asarray(bics)
    return PathResult(
        rho_grid=rho_grid,
        fits=fits,
        bic=bics,
        selected_index=int(np.argmin(bics)),
    )


def marginal_probability(beta: np.ndarray, sigma_G: np.ndarray | None,
                         block: RegionBlock) -> np.ndarray:
    """P(y=1) with the random effects integrated out.

    Phi(beta'x / sqrt(1 + z' Sigma_G z)); a missing covariance means the
    plain-probit predictor Phi(beta'x).
    """
    if block.X.shape[1] != beta.shape[0]:
        raise ValueError(
            f"region {block.region_id}: {block.X.shape[1]} covariates, "
            f"beta has {beta.shape[0]}"
        )
    eta = block.X @ beta
    if sigma_G is None:
        return special.ndtr(eta)
    if sigma_G.shape[0] != block.n_groups:
        raise ValueError(f"region {block.region_id}: loading/covariance mismatch")
    if block.is_onehot:
        s2 = 1.0 + np.diag(sigma_G)[block.group_index]
    else:
        Z = block.Z
        s2 = 1.0 + np.einsum("ig,gh,ih->i", Z, sigma_G, Z)
    return special.ndtr(eta / np.sqrt(s2))


def predict(params: ModelParams, block: RegionBlock) -> np.ndarray:
    """Marginal default probabilities for one region under fitted params."""
    return marginal_probability(params.beta, params.sigma_G, block)
