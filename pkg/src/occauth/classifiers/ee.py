"""Elliptic envelope: Mahalanobis distance under a Minimum Covariance
Determinant (MCD) estimate of location and scatter.

The MCD subset of size ``h`` is searched with FAST-MCD concentration steps
from random ``(dim + 1)``-point starts. When the number of ``h``-subsets is
small the search is exhaustive instead, which yields the exact optimum.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from ..core import InsufficientDataError, ParameterError, as_feature_matrix, make_rng
from .base import OccKind, OccModel, check_contamination, default_threshold

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 10_000
RIDGE_TAU = 1e-6
_MAX_CSTEPS = 200


@dataclass(frozen=True)
class EeParams:
    support_fraction: float = 0.75
    contamination: float = 0.1
    n_restarts: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.5 < self.support_fraction <= 1.0:
            raise ParameterError(f"support_fraction must lie in (0.5, 1], got {self.support_fraction}")
        check_contamination(self.contamination)
        if self.n_restarts < 1:
            raise ParameterError("n_restarts must be positive")


def subset_size(n: int, dim: int, support_fraction: float) -> int:
    """``floor(support_fraction * n)``, raised to the smallest admissible size.

    An MCD subset must satisfy ``h > (n + dim + 1) / 2``; it is capped at ``n``.
    """
    h = int(math.floor(support_fraction * n))
    h_min = (n + dim + 1) // 2 + 1
    return min(n, max(h, h_min))


@dataclass(frozen=True)
class McdResult:
    location: np.ndarray
    covariance: np.ndarray  # raw h-subset covariance (divisor h)
    support: np.ndarray  # sorted indices of the h-subset
    det: float
    exhaustive: bool


def _mean_cov(X: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Y = X[idx]
    mu = Y.mean(axis=0)
    D = Y - mu
    return mu, D.T @ D / Y.shape[0]


def _det(S: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(S)
    return 0.0 if sign <= 0 else float(np.exp(logdet))


def _sq_mahalanobis(X: np.ndarray, mu: np.ndarray, S: np.ndarray) -> np.ndarray:
    D = X - mu
    sol = np.linalg.solve(S, D.T).T
    return np.maximum(np.einsum("ij,ij->i", D, sol), 0.0)


def c_steps(X: np.ndarray, idx: np.ndarray, h: int) -> tuple[np.ndarray, float]:
    """Concentrate ``idx`` to an ``h``-subset until the determinant stops falling."""
    mu, S = _mean_cov(X, idx)
    if _det(S) == 0.0:
        return np.sort(idx[:h]), 0.0
    best_idx, best_det = None, math.inf
    for _ in range(_MAX_CSTEPS):
        new = np.sort(np.argsort(_sq_mahalanobis(X, mu, S), kind="stable")[:h])
        mu_new, S_new = _mean_cov(X, new)
        det = _det(S_new)
        # a C-step never increases the determinant; equality means converged
        if det >= best_det:
            break
        best_idx, best_det, mu, S = new, det, mu_new, S_new
        if det == 0.0:
            break
    return best_idx, best_det


def _initial_subset(X: np.ndarray, rng: np.random.Generator, h: int) -> np.ndarray:
    n, dim = X.shape
    perm = rng.permutation(n)
    k = dim + 1
    # grow the start until its covariance is non-singular
    while k < n:
        idx = perm[:k]
        if _det(_mean_cov(X, idx)[1]) > 0:
            return idx
        k += 1
    return perm[:h]


def exhaustive_mcd(X: np.ndarray, h: int) -> McdResult:
    """Exact MCD by evaluating every ``h``-subset."""
    n, dim = X.shape
    best_det, best_idx = math.inf, None
    combos = itertools.combinations(range(n), h)
    while True:
        block = np.array(list(itertools.islice(combos, 4096)), dtype=np.intp)
        if block.size == 0:
            break
        Y = X[block]  # (m, h, dim)
        D = Y - Y.mean(axis=1, keepdims=True)
        S = np.einsum("mhi,mhj->mij", D, D) / h
        sign, logdet = np.linalg.slogdet(S)
        dets = np.where(sign > 0, np.exp(logdet), 0.0)
        k = int(np.argmin(dets))
        if dets[k] < best_det:
            best_det, best_idx = float(dets[k]), block[k]
    mu, S = _mean_cov(X, best_idx)
    return McdResult(mu, S, best_idx, best_det, True)


def fast_mcd(X: np.ndarray, h: int, n_restarts: int = 50, seed: int = 0) -> McdResult:
    n, dim = X.shape
    if math.comb(n, h) <= EXHAUSTIVE_LIMIT:
        return exhaustive_mcd(X, h)
    rng = make_rng(seed, 2)
    best_det, best_idx = math.inf, None
    for _ in range(n_restarts):
        idx, det = c_steps(X, _initial_subset(X, rng, h), h)
        if det < best_det:
            best_det, best_idx = det, idx
    mu, S = _mean_cov(X, best_idx)
    return McdResult(mu, S, best_idx, best_det, False)


def _regularize(S: np.ndarray) -> np.ndarray:
    dim = S.shape[0]
    scale = np.trace(S) / dim
    if scale <= 0:
        scale = 1.0
    return S + RIDGE_TAU * scale * np.eye(dim)


class EeModel(OccModel):
    kind = OccKind.EE

    def __init__(self, params: EeParams, location, covariance, training_scores=None,
                 threshold: float | None = None, regularized: bool = False,
                 fallback: bool = False, mcd_det: float | None = None):
        self.params = params
        self.location = np.asarray(location, dtype=np.float64)
        self.covariance = np.asarray(covariance, dtype=np.float64)
        self.dim = self.location.shape[0]
        self.precision = np.linalg.inv(self.covariance)
        self.regularized = regularized
        self.fallback = fallback
        self.mcd_det = mcd_det
        self.training_scores = (
            np.empty(0) if training_scores is None else np.asarray(training_scores, float)
        )
        if threshold is None:
            threshold = (
                default_threshold(self.training_scores, params.contamination)
                if self.training_scores.size
                else 0.0
            )
        self.threshold = float(threshold)

    def mahalanobis(self, X) -> np.ndarray:
        X = as_feature_matrix(X, dim=self.dim)
        D = X - self.location
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", D, self.precision, D), 0.0))

    def _scores(self, X):
        return -self.mahalanobis(X)

    def get_state(self):
        return {
            "location": self.location.tolist(),
            "covariance": self.covariance.tolist(),
            "training_scores": self.training_scores.tolist(),
            "threshold": self.threshold,
            "regularized": self.regularized,
            "fallback": self.fallback,
        }

    @classmethod
    def from_state(cls, params, state):
        return cls(params, state["location"], state["covariance"], state["training_scores"],
                   state["threshold"], state["regularized"], state["fallback"])


def fit_ee(X, params: EeParams = EeParams(), allow_fallback: bool = False) -> EeModel:
    """Fit an elliptic envelope on genuine samples.

    The raw MCD covariance is rescaled by ``median(d^2) / chi2_dim.median`` so
    that it is consistent for Gaussian data. With ``allow_fallback`` a
    training set too small for MCD (``N <= dim + 1``) gets the ridge
    regularized sample covariance instead of an error.
    """
    X = as_feature_matrix(X)
    n, dim = X.shape
    fallback = regularized = False
    mcd_det = None
    if n <= dim + 1:
        if not allow_fallback or n < 2:
            raise InsufficientDataError(
                f"elliptic envelope needs more than dim + 1 = {dim + 1} samples, got {n}"
            )
        log.warning("EE: %d samples for dim %d, using regularized sample covariance", n, dim)
        fallback = True
        mu = X.mean(axis=0)
        S = np.cov(X, rowvar=False, ddof=1).reshape(dim, dim)
    else:
        h = subset_size(n, dim, params.support_fraction)
        res = fast_mcd(X, h, params.n_restarts, params.seed)
        mu, S, mcd_det = res.location, res.covariance, res.det
    if _det(S) <= 0 or np.linalg.cond(S) > 1e12:
        if not fallback:
            log.warning("EE: singular robust covariance, ridge regularized")
        S = _regularize(S)
        regularized = True
    if not fallback:
        d2 = _sq_mahalanobis(X, mu, S)
        med = np.median(d2)
        if med > 0:
            S = S * (med / chi2.ppf(0.5, dim))
    model = EeModel(params, mu, S, regularized=regularized, fallback=fallback, mcd_det=mcd_det)
    model.training_scores = model._scores(X)
    model.threshold = default_threshold(model.training_scores, params.contamination)
    return model
