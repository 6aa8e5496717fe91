"""nu one-class SVM with an RBF kernel, trained by SMO on the dual.

The dual solved here is::

    minimize    1/2 a^T K a
    subject to  0 <= a_i <= 1 / (nu * N),   sum(a) = 1

With gradient ``g = K a`` the KKT conditions say that some offset ``rho``
satisfies ``g_i >= rho`` where ``a_i = 0``, ``g_i <= rho`` where ``a_i`` is
at its upper bound and ``g_i = rho`` in between. The decision value of a
point is ``f(x) = sum_i a_i k(x_i, x) - rho``; training points at the upper
bound are exactly the margin errors, of which there are at most ``nu * N``.

The stopping tolerance applies to the maximal KKT violation expressed on the
conventional ``0 <= a_i <= 1, sum(a) = nu * N`` scaling of the same problem,
i.e. ``nu * N`` times the violation in the scaling above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..core import ConvergenceError, InsufficientDataError, ParameterError, as_feature_matrix
from .base import OccKind, OccModel

_TAU = 1e-12  # floor on the curvature of a pair update


@dataclass(frozen=True)
class Sv1cParams:
    nu: float = 0.1
    epsilon: float = 1e-3
    gamma: float | str = "auto"
    max_iter: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ParameterError(f"nu must lie in (0, 1], got {self.nu}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma != "auto" and not (isinstance(self.gamma, (int, float)) and self.gamma > 0):
            raise ParameterError(f"gamma must be positive or 'auto', got {self.gamma!r}")
        if self.max_iter < 1:
            raise ParameterError("max_iter must be positive")

    def resolve_gamma(self, dim: int) -> float:
        return 1.0 / dim if self.gamma == "auto" else float(self.gamma)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * A @ B.T
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


class _KernelColumns:
    """Kernel matrix access: dense for small problems, cached columns otherwise."""

    DENSE_LIMIT = 4000

    def __init__(self, X: np.ndarray, gamma: float):
        self.X, self.gamma = X, gamma
        n = X.shape[0]
        self.dense = rbf_kernel(X, X, gamma) if n <= self.DENSE_LIMIT else None
        self.diag = np.ones(n)  # k(x, x) = 1 for the RBF kernel
        self._column = lru_cache(maxsize=512)(self._compute)

    def _compute(self, i: int) -> np.ndarray:
        return rbf_kernel(self.X, self.X[i : i + 1], self.gamma)[:, 0]

    def column(self, i: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[:, i]
        return self._column(i)


@dataclass(frozen=True)
class DualSolution:
    alpha: np.ndarray
    rho: float
    gradient: np.ndarray
    gap: float
    n_iter: int


def solve_dual(kernel: _KernelColumns, n: int, nu: float, eps: float, max_iter: int) -> DualSolution:
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_full = min(n, int(math.floor(nu * n)))
    alpha[:n_full] = C
    if n_full < n:
        alpha[n_full] = 1.0 - n_full * C
    grad = np.zeros(n)
    for j in np.flatnonzero(alpha):
        grad += alpha[j] * kernel.column(j)

    def bounds():
        up = alpha < C  # may grow
        low = alpha > 0  # may shrink
        return up, low

    n_iter = 0
    while True:
        up, low = bounds()
        if not up.any() or not low.any():
            gap = 0.0
            break
        g_low = np.where(low, grad, -np.inf)
        j = int(np.argmax(g_low))
        g_max = g_low[j]
        g_min = grad[up].min()
        # measured on the conventional 0 <= a_i <= 1 scaling (sum(a) = nu * N)
        gap = float(g_max - g_min) * nu * n
        if gap <= eps:
            break
        if n_iter >= max_iter:
            raise ConvergenceError(f"one-class SVM did not converge in {max_iter} iterations", gap)

        # second-order choice of the partner that gains the most
        Kj = kernel.column(j)
        b = g_max - grad
        eta = np.maximum(kernel.diag + kernel.diag[j] - 2.0 * Kj, _TAU)
        gain = np.where(up & (b > 0), b * b / eta, -np.inf)
        i = int(np.argmax(gain))

        t = min(b[i] / eta[i], C - alpha[i], alpha[j])
        if t == C - alpha[i]:
            new_i = C
        else:
            new_i = alpha[i] + t
        if t == alpha[j]:
            new_j = 0.0
        else:
            new_j = alpha[j] - t
        di, dj = new_i - alpha[i], new_j - alpha[j]
        alpha[i], alpha[j] = new_i, new_j
        grad += di * kernel.column(i) + dj * Kj
        n_iter += 1

    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(grad[free].mean())
    else:
        up, low = bounds()
        hi = grad[low].max() if low.any() else grad.max()
        lo = grad[up].min() if up.any() else grad.min()
        rho = float((hi + lo) / 2)
    return DualSolution(alpha, rho, grad, gap, n_iter)


class Sv1cModel(OccModel):
    kind = OccKind.SV1C

    def __init__(self, params: Sv1cParams, support: np.ndarray, alpha: np.ndarray,
                 rho: float, gamma: float, training_scores: np.ndarray, n_iter: int = 0,
                 gap: float = 0.0):
        self.params = params
        self.support = support
        self.alpha = alpha
        self.rho = rho
        self.gamma = gamma
        self.dim = support.shape[1]
        self.threshold = 0.0
        self.training_scores = training_scores
        self.n_iter = n_iter
        self.gap = gap

    def _scores(self, X):
        out = np.empty(X.shape[0])
        step = max(1, 2_000_000 // max(1, self.support.shape[0]))
        for s in range(0, X.shape[0], step):
            out[s : s + step] = rbf_kernel(X[s : s + step], self.support, self.gamma) @ self.alpha
        return out - self.rho

    def get_state(self):
        return {
            "support": self.support.tolist(),
            "alpha": self.alpha.tolist(),
            "rho": self.rho,
            "gamma": self.gamma,
            "training_scores": self.training_scores.tolist(),
        }

    @classmethod
    def from_state(cls, params, state):
        support = np.asarray(state["support"], float)
        return cls(params, support.reshape(len(state["alpha"]), -1), np.asarray(state["alpha"], float),
                   float(state["rho"]), float(state["gamma"]),
                   np.asarray(state["training_scores"], float))


def fit_sv1c(X, params: Sv1cParams = Sv1cParams()) -> Sv1cModel:
    """Train a nu one-class SVM on genuine samples."""
    X = as_feature_matrix(X)
    n, dim = X.shape
    if n < 2:
        raise InsufficientDataError("one-class SVM needs at least two samples")
    gamma = params.resolve_gamma(dim)
    kernel = _KernelColumns(X, gamma)
    sol = solve_dual(kernel, n, params.nu, params.epsilon, params.max_iter)
    sv = sol.alpha > 0
    model = Sv1cModel(
        params,
        X[sv].copy(),
        sol.alpha[sv].copy(),
        sol.rho,
        gamma,
        training_scores=np.empty(0),
        n_iter=sol.n_iter,
        gap=sol.gap,
    )
    # rescore rather than reuse the incrementally updated gradient, so that
    # training scores agree bit-for-bit with later scoring of the same points
    model.training_scores = model._scores(X)
    return model
