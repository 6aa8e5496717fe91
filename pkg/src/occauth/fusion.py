"""Impostor-free score normalization, score/decision fusion and stacking."""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .classifiers import OccKind, Sv1cModel, Sv1cParams, fit_sv1c
from .classifiers.base import ALL_KINDS
from .core import Decision, InsufficientDataError, OccAuthError, ParameterError, as_feature_matrix

METHODS = ("logistic", "tanh", "softsign")
LN19 = math.log(19.0)
MIN_STACKER_SAMPLES = 8


class IncompleteFusionError(OccAuthError, ValueError):
    pass


class DegenerateCalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NormalizerConfig:
    method: str = "logistic"
    beta: float = 1.0
    offset: float = 0.0  # score mapped to the midpoint of the output range

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown normalizer {self.method!r}; expected one of {METHODS}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ParameterError(f"beta must be positive, got {self.beta}")


def normalize(raw, cfg: NormalizerConfig = NormalizerConfig()):
    """Squash raw scores onto a bounded, strictly increasing scale.

    logistic: 1 / (1 + exp(-beta * s))          in (0, 1)
    tanh:     2 / (1 + exp(-2 * beta * s)) - 1  in (-1, 1)
    softsign: s / (1 + |s|)                     in (-1, 1), beta unused

    ``s`` is the raw score minus ``cfg.offset``.
    """
    s = np.asarray(raw, dtype=np.float64) - cfg.offset
    if cfg.method == "logistic":
        out = expit(cfg.beta * s)
    elif cfg.method == "tanh":
        # identical to 2 / (1 + exp(-2 beta s)) - 1, without the cancellation near 0
        out = np.tanh(cfg.beta * s)
    else:
        out = s / (1.0 + np.abs(s))
    return float(out) if np.ndim(out) == 0 else out


def calibrate_beta(genuine_train_scores, method: str = "logistic") -> NormalizerConfig:
    """Choose beta and offset from genuine training scores alone.

    The offset is the genuine median q50 and ``beta = ln(19) / (q95 - q50)``,
    so the logistic maps the median to 0.5 and the 95th percentile to 0.95.
    Zero spread falls back to beta = 1 with a warning.
    """
    s = np.asarray(genuine_train_scores, dtype=np.float64).ravel()
    if s.size < 2 or not np.all(np.isfinite(s)):
        raise InsufficientDataError("calibration needs at least two finite scores")
    q50, q95 = np.quantile(s, [0.5, 0.95])
    spread = q95 - q50
    if not spread > 0:
        warnings.warn("genuine scores have no spread above the median; beta set to 1",
                      DegenerateCalibrationWarning, stacklevel=2)
        return NormalizerConfig(method, 1.0, float(q50))
    return NormalizerConfig(method, LN19 / float(spread), float(q50))


def log_mean_logistic(z_members) -> np.ndarray:
    """``log(mean_i expit(z_i))`` over the member axis, computed without underflow.

    A strictly increasing transform of the mean of logistic-normalized scores
    that keeps distinct inputs distinct where ``expit`` itself would round to
    0 or 1: below the median it never underflows, above it distinct values
    stay distinct up to z of about 700. Fusing identical members gives the
    single-member value.
    """
    Z = np.asarray(z_members, dtype=np.float64)
    L = log_expit(Z)
    top = L.max(axis=0)
    low_side = top + np.log(np.mean(np.exp(L - top), axis=0))
    # near log(1) use log1p of the mean complement, which expit(-z) gives accurately
    q = np.mean(expit(-Z), axis=0)
    return np.where(q < 0.5, np.log1p(-np.minimum(q, 0.5)), low_side)


def fuse_scores(member_scores, weights=None) -> np.ndarray | float:
    """Mean of normalized member scores.

    ``member_scores`` is a sequence (one entry per member) of scalars or
    equal-length arrays; ``weights`` optionally gives a weighted mean.
    """
    if isinstance(member_scores, Mapping):
        member_scores = list(member_scores.values())
    if len(member_scores) == 0:
        raise IncompleteFusionError("no member scores to fuse")
    if any(m is None for m in member_scores):
        raise IncompleteFusionError("a member score is missing")
    arr = np.asarray(member_scores, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise IncompleteFusionError("member scores must be finite")
    if weights is None:
        out = arr.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (arr.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("weights must be non-negative, one per member, not all zero")
        out = np.tensordot(w / w.sum(), arr, axes=1)
    return float(out) if np.ndim(out) == 0 else out


def fuse_decisions(decisions: Sequence[Decision]) -> Decision:
    """Majority vote; an exact tie rejects."""
    decisions = [Decision(d) for d in decisions]
    if len(decisions) < 2:
        raise ParameterError("decision fusion needs at least two decisions")
    accepts = sum(d is Decision.ACCEPT for d in decisions)
    return Decision.ACCEPT if 2 * accepts > len(decisions) else Decision.REJECT


def vote_threshold(n_members: int) -> float:
    """Accept-vote share that a strict majority needs, for ``votes/m >= theta``."""
    return (n_members // 2 + 1) / n_members


def enumerate_fusions(kinds: Sequence[OccKind] = ALL_KINDS) -> list[tuple[OccKind, ...]]:
    """All member subsets of size >= 2, by size then in kind order."""
    kinds = tuple(kinds)
    return [c for r in range(2, len(kinds) + 1) for c in itertools.combinations(kinds, r)]


def fusion_name(members: Sequence[OccKind]) -> str:
    return "+".join(OccKind.parse(m).name for m in members)


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    matrix: np.ndarray
    undefined: np.ndarray  # True where a column had zero variance

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *self.names])
            for name, row in zip(self.names, self.matrix):
                w.writerow([name, *["" if np.isnan(v) else repr(float(v)) for v in row]])


def score_correlation(score_table, names: Sequence[str] | None = None) -> CorrelationMatrix:
    """Pearson correlations between classifier score columns.

    ``score_table`` is ``(n_samples, n_classifiers)``. Entries involving a
    zero-variance column are NaN and flagged in ``undefined``.
    """
    S = as_feature_matrix(score_table, name="score_table")
    n, m = S.shape
    if n < 2:
        raise InsufficientDataError("correlation needs at least two samples")
    D = S - S.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", D, D))
    flat = norms <= 1e-12 * np.maximum(1.0, np.abs(S).max(axis=0))
    safe = np.where(flat, 1.0, norms)
    R = (D.T @ D) / np.outer(safe, safe)
    R = np.clip((R + R.T) / 2, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    undefined = flat[:, None] | flat[None, :]
    R[undefined] = np.nan
    names = tuple(names) if names is not None else tuple(f"c{i + 1}" for i in range(m))
    return CorrelationMatrix(names, R, undefined)


def fit_stacker(score_vectors, params: Sv1cParams = Sv1cParams()) -> Sv1cModel:
    """One-class SVM over vectors of normalized member scores of genuine samples."""
    V = as_feature_matrix(score_vectors, name="score_vectors")
    if V.shape[0] < MIN_STACKER_SAMPLES:
        raise InsufficientDataError(
            f"stacking needs at least {MIN_STACKER_SAMPLES} genuine score vectors, got {V.shape[0]}"
        )
    return fit_sv1c(V, params)
