"""Standardization and PCA, fitted on a user's genuine training data only."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InsufficientDataError, ParameterError, as_feature_matrix

# features whose std falls below this are treated as constant
_DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def transform(self, X) -> np.ndarray:
        X = as_feature_matrix(X, dim=self.dim)
        return (X - self.means) / self.stds

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float))


def fit_standardizer(X) -> Standardizer:
    """Per-feature mean and population standard deviation.

    Constant features get a std of 1 so they map to zero instead of NaN.
    """
    X = as_feature_matrix(X)
    if X.shape[0] == 0:
        raise InsufficientDataError("cannot fit a standardizer on zero samples")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > _DEGENERATE_STD, stds, 1.0)
    return Standardizer(means, stds)


@dataclass(frozen=True)
class PcaProjector:
    mean: np.ndarray
    components: np.ndarray  # (n_kept, dim), orthonormal rows
    explained_variance: np.ndarray  # all dim eigenvalues, non-increasing
    keep_fraction: float

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, X) -> np.ndarray:
        X = as_feature_matrix(X, dim=self.dim)
        return (X - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64).reshape(-1, self.n_components)
        return Z @ self.components + self.mean

    def explained_variance_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        if total <= 0:
            return np.zeros(self.n_components)
        return self.explained_variance[: self.n_components] / total

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "keep_fraction": self.keep_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaProjector":
        dim = len(d["mean"])
        return cls(
            np.asarray(d["mean"], float),
            np.asarray(d["components"], float).reshape(-1, dim),
            np.asarray(d["explained_variance"], float),
            float(d["keep_fraction"]),
        )


def n_kept_components(dim: int, keep_fraction: float) -> int:
    # the tiny slack stops 0.3 * 10 = 3.0000000000000004 from rounding up to 4
    return max(1, min(dim, math.ceil(keep_fraction * dim - 1e-9)))


def fit_pca(X, keep_fraction: float = 0.30) -> PcaProjector:
    """Keep the top ``ceil(keep_fraction * dim)`` principal directions.

    Directions come from the eigendecomposition of the sample covariance
    (divisor N - 1), ranked by eigenvalue.
    """
    X = as_feature_matrix(X)
    if X.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least two samples")
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError("keep_fraction must lie in (0, 1]")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude loading of each component positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    k = n_kept_components(X.shape[1], keep_fraction)
    return PcaProjector(mean, evecs[:, :k].T.copy(), evals, keep_fraction)
