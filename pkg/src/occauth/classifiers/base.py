from __future__ import annotations

import enum
from typing import Any, ClassVar

import numpy as np

from ..core import Decision, InvalidScoreError, ParameterError, ShapeError, as_feature_matrix


class OccKind(str, enum.Enum):
    SV1C = "sv1c"
    EE = "ee"
    IF = "if"
    LOF = "lof"

    @classmethod
    def parse(cls, value) -> "OccKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ParameterError(
                f"unknown classifier {value!r}; expected one of {[k.value for k in cls]}"
            ) from None

    @property
    def label(self) -> str:
        return self.name


ALL_KINDS = (OccKind.SV1C, OccKind.EE, OccKind.IF, OccKind.LOF)


def check_contamination(c: float) -> None:
    if not 0.0 <= c < 0.5:
        raise ParameterError(f"contamination must lie in [0, 0.5), got {c}")


def default_threshold(train_scores: np.ndarray, contamination: float) -> float:
    """Score below which the ``contamination`` share of training data falls."""
    if contamination == 0.0:
        return float(np.min(train_scores))
    return float(np.quantile(train_scores, contamination))


class OccModel:
    """A fitted one-class model.

    Subclasses implement ``_scores`` on validated input. ``threshold`` is the
    model's own default operating point (0 for the one-class SVM, a training
    score quantile for the others); ``training_scores`` holds the scores of
    the enrolment samples as seen during fitting.
    """

    kind: ClassVar[OccKind]
    dim: int
    threshold: float
    training_scores: np.ndarray

    def _scores(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score_samples(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ShapeError(
                f"{self.kind.name} model expects dim {self.dim}, got shape {X.shape}"
            )
        X = as_feature_matrix(X, dim=self.dim)
        s = self._scores(X)
        if not np.all(np.isfinite(s)):
            raise InvalidScoreError(f"{self.kind.name} produced a non-finite score")
        return s

    def score(self, x) -> float:
        return float(self.score_samples(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.threshold

    def predict(self, x, threshold: float | None = None) -> Decision:
        theta = self.threshold if threshold is None else threshold
        return Decision.from_score(self.score(x), theta)

    # serialization ---------------------------------------------------------
    def get_state(self) -> dict[str, Any]:
        raise NotImplementedError

    @classmethod
    def from_state(cls, params, state: dict[str, Any]) -> "OccModel":
        raise NotImplementedError


def pairwise_distances(A: np.ndarray, B: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Euclidean distances by explicit differences (no dot-product shortcut).

    The difference form keeps exact zeros and symmetric ties that the
    ``|a|^2 + |b|^2 - 2ab`` expansion loses.
    """
    out = np.empty((A.shape[0], B.shape[0]))
    step = max(1, chunk_elems // max(1, B.shape[0] * A.shape[1]))
    for s in range(0, A.shape[0], step):
        diff = A[s : s + step, None, :] - B[None, :, :]
        out[s : s + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out
