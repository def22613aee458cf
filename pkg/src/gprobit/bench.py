"""Simulation data generator and evaluation statistics.

The generating process draws a sparse binary precision support for the
group effects (each off-diagonal is an edge with probability scale/G),
repairs it to positive definite by minimal diagonal loading, and
thresholds Gaussian latents built from Cholesky draws.  Evaluation
covers bias/RMSE over replications, outcome ROC/AUC, network-recovery
ROC along a penalty path, and the classification table at a fixed
threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, RegionBlock

__all__ = [
    "SimDesign",
    "PrecisionDraw",
    "EvalReport",
    "gen_precision",
    "gen_dataset",
    "bias_rmse",
    "roc_curve",
    "network_roc",
    "classification_table",
    "table2_rows",
]


@dataclass(frozen=True)
class SimDesign:
    N: int                      # observations per region
    G: int
    R: int
    beta: float = 1.0           # scalar true coefficient (K = 1)
    edge_prob_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.G, self.R) < 1:
            raise ValueError("N, G, R must all be >= 1")
        if not 0 < min(self.edge_prob_scale / self.G, 1.0) <= 1:
            raise ValueError("edge_prob_scale must be positive")


@dataclass(frozen=True)
class PrecisionDraw:
    theta: np.ndarray     # repaired precision
    support: np.ndarray   # binary off-diagonal support (ground truth)
    sigma: np.ndarray     # inverse of theta


@dataclass
class EvalReport:
    bias: float = float("nan")
    rmse: float = float("nan")
    roc_points: list = field(default_factory=list)
    auc: float = float("nan")
    wall_time: float = 0.0


def gen_precision(G: int, scale: float, seed) -> PrecisionDraw:
    """Random sparse precision: Bernoulli(scale/G) unit off-diagonals on a
    unit diagonal, diagonally loaded to a minimum eigenvalue of 0.1."""
    p = scale / G
    if not 0 < p <= 1:
        raise ValueError(f"edge probability {p} outside (0, 1]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    theta = np.zeros((G, G))
    iu = np.triu_indices(G, k=1)
    edges = (rng.random(len(iu[0])) < p).astype(float)
    theta[iu] = edges
    theta = theta + theta.T + np.eye(G)
    support = (theta - np.diag(np.diag(theta)) != 0).astype(np.int8)
    delta = 0.0
    while np.linalg.eigvalsh(theta + delta * np.eye(G))[0] < 0.1:
        delta += 0.1
    theta = theta + delta * np.eye(G)
    sigma = np.linalg.inv(theta)
    sigma = 0.5 * (sigma + sigma.T)
    return PrecisionDraw(theta=theta, support=support, sigma=sigma)


def gen_dataset(design: SimDesign, sigma_g: np.ndarray | None = None,
                support: np.ndarray | None = None):
    """Simulated dataset plus the ground truth used to generate it.

    Observations are assigned to groups cyclically (i mod G), giving
    balanced one-hot loadings.  ``sigma_g`` overrides the drawn group
    covariance (its support should then be passed too).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(design.seed)))
    G = design.G
    if sigma_g is None:
        draw = gen_precision(G, design.edge_prob_scale, (design.seed, 1))
        sigma_g = draw.sigma
        support = draw.support
    elif support is None:
        theta = np.linalg.inv(sigma_g)
        support = (np.abs(theta - np.diag(np.diag(theta))) > 1e-12).astype(np.int8)
    D = np.linalg.cholesky(sigma_g)
    grp = np.arange(design.N, dtype=np.int64) % G
    blocks = []
    for r in range(design.R):
        x = rng.standard_normal((design.N, 1))
        u = D @ rng.standard_normal(G)
        eps = rng.standard_normal(design.N)
        ystar = design.beta * x[:, 0] + u[grp] + eps
        y = (ystar >= 0).astype(np.int8)
        blocks.append(RegionBlock(r, y, x, G, group_index=grp.copy()))
    dataset = Dataset(tuple(blocks), 1, G)
    truth = {"beta": design.beta, "sigma_G": sigma_g, "support": support}
    return dataset, truth


def bias_rmse(estimates, truth: float) -> tuple[float, float]:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    return float(est.mean() - truth), float(np.sqrt(np.mean((est - truth) ** 2)))


def roc_curve(scores, labels):
    """Threshold-sweep ROC with tied scores grouped.

    Returns (thresholds, points, auc); points run from (0,0) to (1,1)
    and the AUC is the trapezoid area (equals the tie-adjusted
    concordance probability).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both outcome classes for a ROC curve")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = (labels[order] == 1).astype(float)
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], int)
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(pos)[cut]
    fp = (cut + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s[cut]])
    auc = float(np.trapezoid(tpr, fpr))
    points = list(zip(fpr.tolist(), tpr.tolist()))
    return thresholds, points, auc


def network_roc(phi_path, true_support, tol: float = 1e-8):
    """(FPR, TPR) of off-diagonal support recovery for each path estimate."""
    true_support = np.asarray(true_support)
    G = true_support.shape[0]
    iu = np.triu_indices(G, k=1)
    truth = true_support[iu] != 0
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    pts = []
    for phi in phi_path:
        phi = np.asarray(phi)
        if phi.shape != true_support.shape:
            raise ValueError(
                f"path matrix is {phi.shape}, support is {true_support.shape}"
            )
        est = np.abs(phi[iu]) > tol
        tp = int(np.sum(est & truth))
        fp = int(np.sum(est & ~truth))
        tpr = tp / n_pos if n_pos else 1.0
        fpr = fp / n_neg if n_neg else 0.0
        pts.append((fpr, tpr))
    return pts


def classification_table(scores, labels, threshold: float):
    """Class-conditional accuracy percentages at a probability threshold:
    (% of zeros predicted below it, % of ones predicted at or above it)."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    neg = labels == 0
    pos = labels == 1
    if not neg.any() or not pos.any():
        raise ValueError("need both outcome classes")
    pct_nonfailed = 100.0 * float(np.mean(scores[neg] < threshold))
    pct_failed = 100.0 * float(np.mean(scores[pos] >= threshold))
    return pct_nonfailed, pct_failed


def table2_rows(design: SimDesign, estimators, n_replications: int,
                fit_fns: dict, threads: int = 1):
    """Bias/RMSE/mean-time rows, one per estimator, over shared replications.

    ``fit_fns`` maps estimator name to a callable dataset -> FitResult;
    replication r uses the deterministic seed (design.seed, r).  The group
    covariance is drawn once per design and held fixed across
    replications (one experiment, many samples), so bias/RMSE measure
    estimation error rather than network-to-network variation.  The
    optional thread pool parallelises replications; rows reduce in
    replication order either way so output never depends on the pool.
    """
    from concurrent.futures import ThreadPoolExecutor

    draw = gen_precision(design.G, design.edge_prob_scale, (design.seed, 1))

    def one(rep):
        d = SimDesign(design.N, design.G, design.R, design.beta,
                      design.edge_prob_scale, seed=(design.seed, rep))
        dataset, truth = gen_dataset(d, sigma_g=draw.sigma, support=draw.support)
        out = {}
        for name in estimators:
            t0 = time.perf_counter()
            res = fit_fns[name](dataset)
            out[name] = (float(res.params.beta[0]), time.perf_counter() - t0)
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_replications)))
    else:
        results = [one(r) for r in range(n_replications)]

    rows = []
    for name in estimators:
        betas = [res[name][0] for res in results]
        times = [res[name][1] for res in results]
        bias, rmse = bias_rmse(betas, design.beta)
        rows.append({
            "N": design.N, "G": design.G, "R": design.R, "estimator": name,
            "bias": bias, "rmse": rmse, "seconds": float(np.mean(times)),
        })
    return rows
