"""Local outlier factor in novelty mode.

Training points keep their k-distance and local reachability density (lrd).
A query never joins the training set: its k nearest training points give

    reach(x, o) = max(k_distance(o), d(x, o))
    lrd(x)      = 1 / mean_o reach(x, o)
    LOF(x)      = mean_o lrd(o) / lrd(x)

Neighbour ties are broken by training index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import InsufficientDataError, ParameterError, as_feature_matrix
from .base import OccKind, OccModel, check_contamination, default_threshold, pairwise_distances

REACH_FLOOR = 1e-12


def default_k(n: int) -> int:
    return max(5, min(20, n // 2))


@dataclass(frozen=True)
class LofParams:
    k_neighbors: int | None = None  # None: max(5, min(20, N // 2))
    contamination: float = 0.1

    def __post_init__(self):
        if self.k_neighbors is not None and self.k_neighbors < 1:
            raise ParameterError("k_neighbors must be positive")
        check_contamination(self.contamination)


def _knn(D: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(D, axis=1, kind="stable")[:, :k]


class LofModel(OccModel):
    kind = OccKind.LOF

    def __init__(self, params: LofParams, X: np.ndarray, k: int, k_distance: np.ndarray,
                 lrd: np.ndarray, training_scores=None, threshold: float = 0.0):
        self.params = params
        self.X = X
        self.k = k
        self.k_distance = k_distance
        self.lrd = lrd
        self.dim = X.shape[1]
        self.training_scores = np.empty(0) if training_scores is None else np.asarray(training_scores, float)
        self.threshold = float(threshold)

    def local_outlier_factor(self, X) -> np.ndarray:
        X = as_feature_matrix(X, dim=self.dim)
        out = np.empty(X.shape[0])
        step = max(1, 2_000_000 // max(1, self.X.shape[0]))
        for s in range(0, X.shape[0], step):
            D = pairwise_distances(X[s : s + step], self.X)
            nbrs = _knn(D, self.k)
            d = np.take_along_axis(D, nbrs, axis=1)
            reach = np.maximum(self.k_distance[nbrs], d)
            lrd_q = 1.0 / np.maximum(reach.mean(axis=1), REACH_FLOOR)
            out[s : s + step] = self.lrd[nbrs].mean(axis=1) / lrd_q
        return out

    def _scores(self, X):
        return -self.local_outlier_factor(X)

    def get_state(self):
        return {
            "X": self.X.tolist(),
            "k": self.k,
            "k_distance": self.k_distance.tolist(),
            "lrd": self.lrd.tolist(),
            "training_scores": self.training_scores.tolist(),
            "threshold": self.threshold,
        }

    @classmethod
    def from_state(cls, params, state):
        X = np.asarray(state["X"], float).reshape(len(state["lrd"]), -1)
        return cls(params, X, int(state["k"]), np.asarray(state["k_distance"], float),
                   np.asarray(state["lrd"], float), state["training_scores"], state["threshold"])


def fit_lof(X, params: LofParams = LofParams()) -> LofModel:
    """Precompute k-distances and lrds of the genuine training points.

    Training scores are the leave-self-out LOF values of the training points.
    """
    X = as_feature_matrix(X)
    n = X.shape[0]
    k = params.k_neighbors if params.k_neighbors is not None else default_k(n)
    if k >= n:
        raise ParameterError(f"k_neighbors={k} must be smaller than the {n} training samples")
    if n < 2:
        raise InsufficientDataError("LOF needs at least two samples")
    D = pairwise_distances(X, X)
    np.fill_diagonal(D, np.inf)
    nbrs = _knn(D, k)
    d = np.take_along_axis(D, nbrs, axis=1)
    k_distance = d[:, -1].copy()
    reach = np.maximum(k_distance[nbrs], d)
    lrd = 1.0 / np.maximum(reach.mean(axis=1), REACH_FLOOR)
    train_lof = lrd[nbrs].mean(axis=1) / lrd
    model = LofModel(params, X.copy(), k, k_distance, lrd, training_scores=-train_lof)
    model.threshold = default_threshold(model.training_scores, params.contamination)
    return model
