"""Data model for the correlated mixed probit.

Observations are grouped into regions; within a region every outcome
loads on a vector of group random effects through a loading matrix Z
(one-hot group membership in the credit application, arbitrary dense
loadings in general).  Regions are conditionally independent given the
parameters, so all estimators work region by region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "DataError",
    "RegionBlock",
    "Dataset",
    "ModelParams",
    "region_covariance",
    "validate_dataset",
]


class DataError(ValueError):
    """Raised when raw rows or block shapes violate the data contract."""


@dataclass(frozen=True)
class RegionBlock:
    """Outcomes, covariates and random-effect loadings of one region.

    ``group_index`` holds the 0-based group of each observation when the
    loadings are one-hot; ``loadings`` stores a dense Z otherwise.  At
    least one of the two must be present.
    """

    region_id: int
    y: np.ndarray                    # (n,) int8, values in {0, 1}
    X: np.ndarray                    # (n, K)
    n_groups: int
    group_index: np.ndarray | None = None   # (n,) int64 in [0, G)
    loadings: np.ndarray | None = None      # (n, G) dense Z

    def __post_init__(self):
        n = self.y.shape[0]
        if n < 1:
            raise DataError(f"region {self.region_id}: empty block")
        if self.X.shape[0] != n:
            raise DataError(
                f"region {self.region_id}: X has {self.X.shape[0]} rows, y has {n}"
            )
        if self.group_index is None and self.loadings is None:
            raise DataError(f"region {self.region_id}: no loadings or group index")
        if self.group_index is not None and self.group_index.shape[0] != n:
            raise DataError(f"region {self.region_id}: group_index length mismatch")
        if self.loadings is not None and self.loadings.shape != (n, self.n_groups):
            raise DataError(
                f"region {self.region_id}: Z is {self.loadings.shape}, "
                f"expected {(n, self.n_groups)}"
            )

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def is_onehot(self) -> bool:
        return self.group_index is not None

    @property
    def Z(self) -> np.ndarray:
        """Dense loading matrix, materialised from the group index on demand."""
        if self.loadings is not None:
            return self.loadings
        Z = np.zeros((self.n_obs, self.n_groups))
        Z[np.arange(self.n_obs), self.group_index] = 1.0
        return Z


@dataclass(frozen=True)
class Dataset:
    regions: tuple[RegionBlock, ...]
    n_covariates: int
    n_groups: int
    _xtx: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.regions:
            raise DataError("dataset has no regions")
        ids = [b.region_id for b in self.regions]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate region ids")
        for b in self.regions:
            if b.X.shape[1] != self.n_covariates or b.n_groups != self.n_groups:
                raise DataError(f"region {b.region_id}: inconsistent K or G")

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def n_obs(self) -> int:
        return sum(b.n_obs for b in self.regions)

    @property
    def is_onehot(self) -> bool:
        return all(b.is_onehot for b in self.regions)

    def xtx(self) -> np.ndarray:
        """Pooled Gram matrix sum_r X_r' X_r (cached)."""
        if self._xtx is None:
            acc = np.zeros((self.n_covariates, self.n_covariates))
            for b in self.regions:
                acc += b.X.T @ b.X
            object.__setattr__(self, "_xtx", acc)
        return self._xtx


def _symmetric_inverse(a: np.ndarray) -> np.ndarray:
    c, low = linalg.cho_factor(a, lower=True)
    inv = linalg.cho_solve((c, low), np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class ModelParams:
    """Regression coefficients plus the group precision and its cached inverse."""

    beta: np.ndarray    # (K,)
    phi_G: np.ndarray   # (G, G) precision, symmetric positive definite
    sigma_G: np.ndarray  # (G, G) covariance, inverse of phi_G

    def __post_init__(self):
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta has non-finite entries")
        if not np.allclose(self.phi_G, self.phi_G.T, atol=1e-10):
            raise ValueError("phi_G is not symmetric")
        resid = self.sigma_G @ self.phi_G - np.eye(self.phi_G.shape[0])
        scale = max(1.0, float(np.abs(self.phi_G).max()) * float(np.abs(self.sigma_G).max()))
        if np.abs(resid).max() > 1e-8 * scale:
            raise ValueError("sigma_G is not the inverse of phi_G")

    @classmethod
    def from_precision(cls, beta: np.ndarray, phi_G: np.ndarray) -> "ModelParams":
        phi_G = 0.5 * (phi_G + phi_G.T)
        try:
            sigma = _symmetric_inverse(phi_G)
        except linalg.LinAlgError as exc:
            raise ValueError("phi_G is not positive definite") from exc
        return cls(np.asarray(beta, dtype=float), phi_G, sigma)

    @classmethod
    def from_covariance(cls, beta: np.ndarray, sigma_G: np.ndarray) -> "ModelParams":
        sigma_G = 0.5 * (sigma_G + sigma_G.T)
        try:
            phi = _symmetric_inverse(sigma_G)
        except linalg.LinAlgError as exc:
            raise ValueError("sigma_G is not positive definite") from exc
        return cls(np.asarray(beta, dtype=float), phi, sigma_G)

    @property
    def n_groups(self) -> int:
        return self.phi_G.shape[0]


def region_covariance(block: RegionBlock, params: ModelParams) -> np.ndarray:
    """Model-implied latent covariance Z Sigma_G Z' + I of one region.

    Exists for small-instance checks and oracles only; the estimators
    never materialise this n x n matrix and work through G x G solves.
    """
    if block.n_groups != params.n_groups:
        raise DataError(
            f"region {block.region_id}: block has G={block.n_groups}, "
            f"params have G={params.n_groups}"
        )
    Z = block.Z
    cov = Z @ params.sigma_G @ Z.T + np.eye(block.n_obs)
    return 0.5 * (cov + cov.T)


def validate_dataset(rows, n_covariates: int, n_groups: int) -> Dataset:
    """Assemble a :class:`Dataset` from parsed rows.

    Each row is ``(region_id, y, group_or_loadings, x)`` where the third
    entry is either a 1-based group label (one-hot mode) or a length-G
    loading vector (dense mode).  Rows are grouped by region id; rejected
    rows name their (1-based) position.
    """
    by_region: dict[int, list] = {}
    onehot = None
    for pos, (region_id, y, gz, x) in enumerate(rows, start=1):
        if y not in (0, 1):
            raise DataError(f"row {pos}: outcome must be 0 or 1, got {y!r}")
        row_onehot = np.ndim(gz) == 0
        if onehot is None:
            onehot = row_onehot
        elif onehot != row_onehot:
            raise DataError(f"row {pos}: mixes group labels and dense loadings")
        if row_onehot:
            g = int(gz)
            if not 1 <= g <= n_groups:
                raise DataError(f"row {pos}: group {g} outside 1..{n_groups}")
            gz = g - 1
        else:
            gz = np.asarray(gz, dtype=float)
            if gz.shape != (n_groups,):
                raise DataError(f"row {pos}: expected {n_groups} loadings")
        x = np.asarray(x, dtype=float)
        if x.shape != (n_covariates,):
            raise DataError(f"row {pos}: expected {n_covariates} covariates")
        if not np.all(np.isfinite(x)) or (not row_onehot and not np.all(np.isfinite(gz))):
            raise DataError(f"row {pos}: non-finite values")
        by_region.setdefault(int(region_id), []).append((y, gz, x))

    blocks = []
    for region_id in sorted(by_region):
        rs = by_region[region_id]
        y = np.array([r[0] for r in rs], dtype=np.int8)
        X = np.array([r[2] for r in rs], dtype=float)
        if onehot:
            gi = np.array([r[1] for r in rs], dtype=np.int64)
            blocks.append(RegionBlock(region_id, y, X, n_groups, group_index=gi))
        else:
            Z = np.array([r[1] for r in rs], dtype=float)
            blocks.append(RegionBlock(region_id, y, X, n_groups, loadings=Z))
    return Dataset(tuple(blocks), n_covariates, n_groups)
