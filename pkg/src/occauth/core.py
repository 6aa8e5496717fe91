"""Shared domain types, score orientation and seeded randomness.

Every score produced by this package is a *genuineness* score: higher means
more genuine. Detectors whose native output grows with abnormality (LOF,
isolation-forest anomaly score, Mahalanobis distance) are negated where they
are wrapped, so one rule applies everywhere: accept iff ``score >= theta``.

Feature vectors are rows of a float64 array of shape ``(n_samples, dim)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


class OccAuthError(Exception):
    """Base class for all errors raised by this package."""


class InvalidScoreError(OccAuthError, ValueError):
    pass


class InsufficientDataError(OccAuthError, ValueError):
    pass


class ParameterError(OccAuthError, ValueError):
    pass


class ShapeError(OccAuthError, ValueError):
    pass


class ConvergenceError(OccAuthError, RuntimeError):
    """Raised when an iterative solver stops at its iteration cap.

    ``gap`` holds the optimality gap reached at the last iteration.
    """

    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (final gap {gap:.3e})")
        self.gap = gap


class SpecError(OccAuthError, ValueError):
    pass


class Ordering(enum.IntEnum):
    B_MORE_GENUINE = -1
    EQUAL = 0
    A_MORE_GENUINE = 1


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"

    @classmethod
    def from_score(cls, score: float, threshold: float) -> "Decision":
        # boundary is inclusive: score == threshold accepts
        return cls.ACCEPT if score >= threshold else cls.REJECT


def compare_scores(a: float, b: float) -> Ordering:
    """Order two genuineness scores; the larger one is the more genuine."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidScoreError(f"non-finite score in comparison: {a!r}, {b!r}")
    if a > b:
        return Ordering.A_MORE_GENUINE
    if a < b:
        return Ordering.B_MORE_GENUINE
    return Ordering.EQUAL


def as_feature_matrix(X, *, name: str = "X", dim: int | None = None) -> np.ndarray:
    """Validate and convert ``X`` to a finite float64 matrix.

    A single vector is promoted to a one-row matrix.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, dim or 0)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (n_samples, dim), got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ShapeError(f"{name} has dim {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidScoreError(f"{name} contains NaN or infinite values")
    return arr


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _as_block(a, dim: int) -> np.ndarray:
    # empty inputs of any shape become (0, dim); anything else keeps its shape
    arr = np.asarray(a, dtype=np.float64)
    return arr.reshape(0, dim) if arr.size == 0 else arr


@dataclass(frozen=True)
class UserDataset:
    """Genuine enrolment data for one user plus their test-session samples.

    ``test_impostor`` stays empty in stored datasets; the evaluation protocol
    borrows impostors from the other users' test sessions when it runs.
    """

    user_id: Hashable
    train_genuine: np.ndarray
    test_genuine: np.ndarray
    test_impostor: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __post_init__(self):
        train = as_feature_matrix(self.train_genuine, name="train_genuine")
        if train.shape[0] == 0:
            raise InsufficientDataError(f"user {self.user_id!r}: train_genuine is empty")
        dim = train.shape[1]
        test = as_feature_matrix(_as_block(self.test_genuine, dim), name="test_genuine", dim=dim)
        imp = as_feature_matrix(_as_block(self.test_impostor, dim), name="test_impostor", dim=dim)
        object.__setattr__(self, "train_genuine", _frozen(train))
        object.__setattr__(self, "test_genuine", _frozen(test))
        object.__setattr__(self, "test_impostor", _frozen(imp))

    @property
    def dim(self) -> int:
        return self.train_genuine.shape[1]


def check_common_dim(datasets: Sequence[UserDataset]) -> int:
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise ShapeError(f"users disagree on feature dimensionality: {sorted(dims)}")
    return dims.pop()


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible generator for ``seed`` and a spawn ``key``.

    Streams with different keys are statistically independent, so per-user
    work can run in any order without changing results.
    """
    if not 0 <= int(seed) < 2**64:
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
