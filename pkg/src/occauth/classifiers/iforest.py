"""Isolation forest with flat-array trees and level-wise vectorized scoring."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from ..core import InsufficientDataError, ParameterError, as_feature_matrix, make_rng
from .base import OccKind, OccModel, check_contamination, default_threshold

EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class IfParams:
    n_trees: int = 100
    subsample_size: int | None = None  # None: min(256, N)
    contamination: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError("n_trees must be positive")
        if self.subsample_size is not None and self.subsample_size < 2:
            raise ParameterError("subsample_size must be at least 2")
        check_contamination(self.contamination)


def harmonic(n) -> np.ndarray:
    """Harmonic number H(n) = 1 + 1/2 + ... + 1/n, exact via the digamma identity."""
    n = np.asarray(n, dtype=np.float64)
    return digamma(n + 1.0) + EULER_GAMMA


def average_path_length(n) -> np.ndarray:
    """c(n): mean unsuccessful-search path length of a BST over ``n`` keys."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    m = n > 1
    out[m] = 2.0 * harmonic(n[m] - 1.0) - 2.0 * (n[m] - 1.0) / n[m]
    return out


@dataclass
class ITree:
    """Flat tree. ``feature[k] < 0`` marks a leaf holding ``size[k]`` points."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.intp)
        depth = np.zeros(X.shape[0])
        active = self.feature[node] >= 0
        rows = np.arange(X.shape[0])
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, self.feature[nd]] < self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            depth[r] += 1.0
            active[r] = self.feature[node[r]] >= 0
        return depth + average_path_length(self.size[node])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "size")}

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["feature"], dtype=np.intp),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.intp),
            np.asarray(d["right"], dtype=np.intp),
            np.asarray(d["size"], dtype=np.intp),
        )


def build_itree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> ITree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node(n):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        return len(feature) - 1

    root = new_node(X.shape[0])
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        k, idx, depth = stack.pop()
        if idx.size <= 1 or depth >= height_limit:
            continue
        Y = X[idx]
        lo, hi = Y.min(axis=0), Y.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue  # all points identical: cannot be isolated further
        q = int(splittable[rng.integers(splittable.size)])
        t = rng.uniform(lo[q], hi[q])
        if t <= lo[q]:  # keep both children non-empty
            t = np.nextafter(lo[q], hi[q])
        mask = Y[:, q] < t
        feature[k], threshold[k] = q, float(t)
        left[k] = new_node(int(mask.sum()))
        right[k] = new_node(int((~mask).sum()))
        stack.append((right[k], idx[~mask], depth + 1))
        stack.append((left[k], idx[mask], depth + 1))
    return ITree(
        np.asarray(feature, dtype=np.intp),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.intp),
        np.asarray(right, dtype=np.intp),
        np.asarray(size, dtype=np.intp),
    )


class IfModel(OccModel):
    kind = OccKind.IF

    def __init__(self, params: IfParams, trees: list[ITree], psi: int, dim: int,
                 training_scores=None, threshold: float = 0.0):
        self.params = params
        self.trees = trees
        self.psi = psi
        self.dim = dim
        self.training_scores = np.empty(0) if training_scores is None else np.asarray(training_scores, float)
        self.threshold = float(threshold)

    def expected_path_length(self, X) -> np.ndarray:
        X = as_feature_matrix(X, dim=self.dim)
        depths = np.stack([tree.path_lengths(X) for tree in self.trees])
        # summing in sorted order makes the mean independent of tree order
        return np.sort(depths, axis=0).sum(axis=0) / len(self.trees)

    def anomaly_score(self, X) -> np.ndarray:
        """s(x) = 2^(-E[h(x)] / c(psi)); near 1 for anomalies, 0.5 at average depth."""
        return np.power(2.0, -self.expected_path_length(X) / float(average_path_length(self.psi)))

    def _scores(self, X):
        return -self.anomaly_score(X)

    def get_state(self):
        return {
            "psi": self.psi,
            "dim": self.dim,
            "trees": [t.to_dict() for t in self.trees],
            "training_scores": self.training_scores.tolist(),
            "threshold": self.threshold,
        }

    @classmethod
    def from_state(cls, params, state):
        return cls(params, [ITree.from_dict(t) for t in state["trees"]], int(state["psi"]),
                   int(state["dim"]), state["training_scores"], state["threshold"])


def fit_iforest(X, params: IfParams = IfParams()) -> IfModel:
    """Grow ``n_trees`` isolation trees, each on ``psi`` points drawn without replacement."""
    X = as_feature_matrix(X)
    n, dim = X.shape
    if n < 2:
        raise InsufficientDataError("isolation forest needs at least two samples")
    psi = params.subsample_size
    if psi is None:
        psi = min(256, n)
    elif psi > n:
        warnings.warn(f"subsample_size {psi} exceeds {n} training samples; clamped to {n}",
                      stacklevel=2)
        psi = n
    height_limit = math.ceil(math.log2(psi))
    rng = make_rng(params.seed, 3)
    trees = [build_itree(X[rng.choice(n, psi, replace=False)], height_limit, rng)
             for _ in range(params.n_trees)]
    model = IfModel(params, trees, psi, dim)
    model.training_scores = model._scores(X)
    model.threshold = default_threshold(model.training_scores, params.contamination)
    return model
