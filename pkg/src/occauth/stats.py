"""Significance tests over user-level HTER vectors.

Kolmogorov-Smirnov normality of paired differences, the Wilcoxon
signed-rank test (exact for up to 20 non-zero differences) and the Friedman
rank test, plus a pairwise battery that lays results out as
``pair, KS, Wilcoxon, Friedman``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import chi2, norm, rankdata

from .core import OccAuthError, ShapeError

ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 20


class DegenerateTestError(OccAuthError, ValueError):
    pass


class AlignmentError(OccAuthError, ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    approximate: bool = False  # p-value from an asymptotic or caveated null
    degenerate: bool = False

    __test__ = False  # not a pytest class

    @property
    def reject_at_05(self) -> bool:
        return self.p_value < ALPHA


@dataclass(frozen=True)
class PairedSample:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).ravel()
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise AlignmentError(f"paired samples differ in length: {a.size} vs {b.size}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def differences(self) -> np.ndarray:
        return self.a - self.b


# Kolmogorov-Smirnov ----------------------------------------------------------

def ks_statistic(x, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """sup_x |F_n(x) - F(x)| for the empirical CDF F_n of ``x``.

    The supremum is attained at a sample point or just left of one, so both
    one-sided limits are compared there. ``cdf`` may be discontinuous.
    """
    xs = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = xs.size
    ecdf_at = np.searchsorted(xs, xs, side="right") / n
    ecdf_left = np.searchsorted(xs, xs, side="left") / n
    F_at = np.asarray(cdf(xs), dtype=np.float64)
    F_left = np.asarray(cdf(np.nextafter(xs, -np.inf)), dtype=np.float64)
    return float(max(np.abs(ecdf_at - F_at).max(), np.abs(ecdf_left - F_left).max()))


def ecdf(x) -> Callable[[np.ndarray], np.ndarray]:
    xs = np.sort(np.asarray(x, dtype=np.float64).ravel())
    return lambda t: np.searchsorted(xs, t, side="right") / xs.size


def ks_normality(d) -> TestResult:
    """One-sample KS test of ``d`` against a normal with estimated mean and sd.

    The p-value uses the asymptotic Kolmogorov distribution of sqrt(n) * D.
    With estimated parameters that p-value is conservative, which
    ``approximate=True`` records.
    """
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.size < 2:
        raise DegenerateTestError("KS test needs at least two values")
    mu, sd = d.mean(), d.std(ddof=1)
    if not sd > 0:
        raise DegenerateTestError("differences have zero variance")
    D = ks_statistic(d, lambda t: norm.cdf((t - mu) / sd))
    p = float(np.clip(kolmogorov(math.sqrt(d.size) * D), 0.0, 1.0))
    return TestResult(D, p, approximate=True)


# Wilcoxon signed-rank --------------------------------------------------------

def _doubled_ranks(abs_d: np.ndarray) -> np.ndarray:
    # average ranks are multiples of 1/2, so doubling keeps them integral
    return np.rint(2 * rankdata(abs_d)).astype(np.int64)


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> list[int]:
    """Number of sign patterns giving each doubled W+ value, by subset-sum DP."""
    total = int(sum(doubled_ranks))
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return counts


def wilcoxon_signed_rank(p: PairedSample | Sequence) -> TestResult:
    """Two-sided signed-rank test of zero median difference.

    Zero differences are dropped and tied magnitudes get average ranks.
    ``W = min(W+, W-)``. Up to 20 non-zero differences the p-value is exact
    over all 2^n sign patterns; beyond that a normal approximation with tie
    and continuity corrections is used.
    """
    d = p.differences if isinstance(p, PairedSample) else np.asarray(p, dtype=np.float64).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    r2 = _doubled_ranks(np.abs(d))
    w_plus2 = int(r2[d > 0].sum())
    total2 = int(r2.sum())
    w_min2 = min(w_plus2, total2 - w_plus2)
    W = w_min2 / 2.0
    if n <= EXACT_WILCOXON_MAX_N:
        counts = signed_rank_null_counts(r2)
        # null is symmetric about total/2: P(W+ <= w) = P(W+ >= total - w)
        tail = sum(counts[: w_min2 + 1])
        pval = min(Fraction(1), Fraction(2 * tail, 2**n))
        return TestResult(W, float(pval))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = max(abs(W - mean) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(W, float(min(1.0, 2.0 * norm.sf(z))), approximate=True)


# Friedman --------------------------------------------------------------------

def friedman(matrix) -> TestResult:
    """Friedman test over a users x treatments matrix (lower = better is irrelevant).

    Ranks within each user with average ranks for ties; the statistic is
    tie-corrected and referred to chi-square with k - 1 degrees of freedom.
    When every user's row is constant there is no rank variation at all:
    the statistic is 0 and p is 1, flagged ``degenerate``.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] < 2 or M.shape[0] < 1:
        raise ShapeError("friedman needs a users x treatments matrix with >= 2 treatments")
    n, k = M.shape
    R = np.apply_along_axis(rankdata, 1, M)
    mean_ranks = R.mean(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * ((mean_ranks - (k + 1) / 2.0) ** 2).sum()
    ties = 0.0
    for row in M:
        _, t = np.unique(row, return_counts=True)
        ties += (t**3 - t).sum()
    correction = 1.0 - ties / (n * (k**3 - k))
    if correction <= 1e-12:
        return TestResult(0.0, 1.0, degenerate=True)
    stat /= correction
    return TestResult(float(stat), float(chi2.sf(stat, k - 1)), approximate=True)


# battery ---------------------------------------------------------------------

@dataclass(frozen=True)
class BatteryRow:
    pair: tuple[str, str]
    ks: TestResult | None
    wilcoxon: TestResult | None
    friedman: TestResult | None
    note: str = ""

    @property
    def label(self) -> str:
        return f"{self.pair[0]}-{self.pair[1]}"


def _user_hters(report) -> dict:
    if isinstance(report, Mapping):
        return dict(report)
    return {u: m.hter for u, m in report.per_user.items()}


def pairwise_battery(reports: Mapping[str, object], pairs: Sequence[tuple[str, str]]) -> list[BatteryRow]:
    """KS, Wilcoxon and Friedman p-values for each classifier pair.

    ``reports`` maps names to EvalReports (or to ``{user: hter}`` mappings);
    all must cover the same users. Degenerate tests are reported as None
    with a note rather than raised.
    """
    hters = {name: _user_hters(r) for name, r in reports.items()}
    user_sets = {name: set(h) for name, h in hters.items()}
    rows = []
    for a, b in pairs:
        for name in (a, b):
            if name not in hters:
                raise AlignmentError(f"no report named {name!r}")
        if user_sets[a] != user_sets[b]:
            raise AlignmentError(f"{a} and {b} cover different users")
        users = sorted(user_sets[a], key=str)
        pa = np.array([hters[a][u] for u in users])
        pb = np.array([hters[b][u] for u in users])
        notes, results = [], {}
        for key, fn in (("ks", lambda: ks_normality(pa - pb)),
                        ("wilcoxon", lambda: wilcoxon_signed_rank(PairedSample(pa, pb))),
                        ("friedman", lambda: friedman(np.column_stack([pa, pb])))):
            try:
                results[key] = fn()
                if results[key].degenerate:
                    notes.append(f"{key} degenerate")
            except DegenerateTestError as exc:
                results[key] = None
                notes.append(f"{key} degenerate: {exc}")
        rows.append(BatteryRow((a, b), results["ks"], results["wilcoxon"], results["friedman"],
                               "; ".join(notes)))
    return rows


def write_battery_csv(path, rows: Sequence[BatteryRow]) -> None:
    def p(r):
        return "" if r is None else repr(float(r.p_value))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "ks_p", "wilcoxon_p", "friedman_p", "note"])
        for row in rows:
            w.writerow([row.label, p(row.ks), p(row.wilcoxon), p(row.friedman), row.note])
