"""Synthetic data, CSV ingestion, sliding windows and per-window features.

Raw sensor CSVs use the layout ``user_id,session,timestamp_s,ch1,...,chK``
with a header row. Feature CSVs written by :func:`write_feature_csv` use
``user_id,session,f1,...,fD``.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    InsufficientDataError,
    OccAuthError,
    ParameterError,
    SpecError,
    UserDataset,
    make_rng,
)

N_STATS = 8
STAT_NAMES = ("mean", "std", "min", "max", "median", "iqr", "mean_abs_change", "zero_crossings")

# slack for floating point in window arithmetic, in seconds
_TIME_EPS = 1e-9


class SchemaError(OccAuthError, ValueError):
    pass


class CsvParseError(OccAuthError, ValueError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DegenerateWindowError(OccAuthError, ValueError):
    pass


@dataclass(frozen=True)
class SensorSeries:
    timestamps: np.ndarray
    channels: np.ndarray
    rate_hint: float | None = None

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim == 1:
            ch = ch.reshape(-1, 1)
        if ch.shape[0] != t.shape[0]:
            raise SpecError(
                f"{t.shape[0]} timestamps but {ch.shape[0]} channel rows"
            )
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise SpecError("timestamps must be monotone non-decreasing")
        t.setflags(write=False)
        ch.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "channels", ch)

    def __len__(self):
        return self.timestamps.shape[0]

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]

    def sample_period(self) -> float:
        if self.rate_hint:
            return 1.0 / self.rate_hint
        if len(self) < 2:
            return 0.0
        return float(np.median(np.diff(self.timestamps)))

    @property
    def duration(self) -> float:
        """Covered time span, counting the last sample's period."""
        if len(self) == 0:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0]) + self.sample_period()


@dataclass(frozen=True)
class WindowSpec:
    length_s: float = 10.0
    step_s: float = 5.0

    def __post_init__(self):
        if not (self.length_s > 0 and self.step_s > 0):
            raise SpecError("window length and step must be positive")
        if self.step_s > self.length_s:
            raise SpecError("step_s must not exceed length_s")


@dataclass(frozen=True)
class Mode:
    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0


@dataclass(frozen=True)
class SynthSpec:
    mode: str = "unimodal"
    n_genuine: int = 500
    modes: Sequence[Mode] = field(default_factory=tuple)
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("unimodal", "multimodal"):
            raise SpecError(f"unknown synthetic mode {self.mode!r}")
        if self.n_genuine < 0:
            raise SpecError("n_genuine must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise SpecError("outlier_fraction must lie in [0, 1)")
        modes = tuple(
            m if isinstance(m, Mode) else Mode(*m) for m in self.modes
        ) or (Mode(np.zeros(2), np.eye(2), 1.0),)
        if self.mode == "unimodal" and len(modes) != 1:
            raise SpecError("unimodal spec takes exactly one mode")
        dim = np.asarray(modes[0].mean).shape[0]
        for m in modes:
            mean = np.asarray(m.mean, dtype=np.float64)
            cov = np.asarray(m.cov, dtype=np.float64)
            if mean.shape != (dim,) or cov.shape != (dim, dim):
                raise SpecError("mode means/covariances disagree on dimension")
            if not np.allclose(cov, cov.T):
                raise SpecError("covariance matrix is not symmetric")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise SpecError("covariance matrix is not positive definite")
        if not math.isclose(sum(m.weight for m in modes), 1.0, abs_tol=1e-9):
            raise SpecError("mode weights must sum to 1")
        object.__setattr__(self, "modes", modes)

    @property
    def dim(self) -> int:
        return int(np.asarray(self.modes[0].mean).shape[0])


def generate_synthetic(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw genuine samples from the mixture plus uniform outliers.

    ``round(outlier_fraction * n_genuine)`` outliers are drawn uniformly from
    a box centred on the genuine data and three times its extent per axis.
    """
    rng = make_rng(spec.seed, 0)
    dim = spec.dim
    weights = np.array([m.weight for m in spec.modes])
    counts = rng.multinomial(spec.n_genuine, weights / weights.sum())
    parts = [
        rng.multivariate_normal(np.asarray(m.mean, float), np.asarray(m.cov, float), size=c)
        for m, c in zip(spec.modes, counts)
    ]
    genuine = np.concatenate(parts, axis=0) if parts else np.empty((0, dim))
    # keep mixture components interleaved rather than grouped by mode
    genuine = genuine[rng.permutation(genuine.shape[0])]

    n_out = int(round(spec.outlier_fraction * spec.n_genuine))
    if genuine.shape[0]:
        lo, hi = genuine.min(axis=0), genuine.max(axis=0)
    else:
        sd = np.array([np.sqrt(np.diag(np.asarray(m.cov, float))) for m in spec.modes])
        mu = np.array([np.asarray(m.mean, float) for m in spec.modes])
        lo, hi = (mu - 3 * sd).min(axis=0), (mu + 3 * sd).max(axis=0)
    centre, extent = (lo + hi) / 2, hi - lo
    outliers = centre + (rng.random((n_out, dim)) - 0.5) * 3.0 * extent
    return genuine, outliers


def bimodal_spec(n_genuine: int = 400, separation: float = 12.0, seed: int = 0) -> SynthSpec:
    """Two equal-weight isotropic 2-D modes on the x-axis, ``separation`` apart."""
    half = separation / 2
    return SynthSpec(
        mode="multimodal",
        n_genuine=n_genuine,
        modes=(
            Mode(np.array([-half, 0.0]), np.eye(2), 0.5),
            Mode(np.array([half, 0.0]), np.eye(2), 0.5),
        ),
        seed=seed,
    )


def make_user_benchmark(
    n_users: int = 10,
    dim: int = 10,
    latent_dim: int = 3,
    separation: float = 10.0,
    n_train: int = 50,
    n_test: int = 50,
    noise: float = 0.1,
    seed: int = 0,
) -> list[UserDataset]:
    """Multi-user feature benchmark with well separated user clusters.

    Users differ in a ``latent_dim``-dimensional behaviour space that a shared
    orthonormal map embeds into ``dim`` features, plus small isotropic feature
    noise. Within-user latent spread is 1, and every pair of user centroids is
    at least ``separation`` apart. Train and test sessions are independent
    draws from the same user distribution.
    """
    if latent_dim > dim:
        raise ParameterError("latent_dim must not exceed dim")
    rng = make_rng(seed, 1)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, latent_dim)))
    # rejection-sample centroids with the required minimum pairwise distance
    side = separation * max(2.0, n_users ** (1.0 / latent_dim)) * 1.5
    centroids: list[np.ndarray] = []
    for _ in range(100_000):
        c = rng.uniform(-side / 2, side / 2, latent_dim)
        if all(np.linalg.norm(c - o) >= separation for o in centroids):
            centroids.append(c)
            if len(centroids) == n_users:
                break
    else:
        raise ParameterError("could not place user centroids at the requested separation")

    users = []
    for u, c in enumerate(centroids):
        def draw(n):
            z = c + rng.standard_normal((n, latent_dim))
            return z @ basis.T + noise * rng.standard_normal((n, dim))

        users.append(UserDataset(f"u{u:02d}", draw(n_train), draw(n_test)))
    return users


def sliding_windows(series: SensorSeries, spec: WindowSpec) -> list[SensorSeries]:
    """Cut ``series`` into windows ``[t0 + i*step, t0 + i*step + length)``.

    Series shorter than one window give an empty list.
    """
    duration = series.duration
    if len(series) == 0 or duration + _TIME_EPS < spec.length_s:
        return []
    count = int(math.floor((duration - spec.length_s + _TIME_EPS) / spec.step_s)) + 1
    t0 = series.timestamps[0]
    rel = series.timestamps - t0
    windows = []
    for i in range(count):
        start = i * spec.step_s
        lo = np.searchsorted(rel, start - _TIME_EPS, side="left")
        hi = np.searchsorted(rel, start + spec.length_s - _TIME_EPS, side="left")
        windows.append(
            SensorSeries(series.timestamps[lo:hi], series.channels[lo:hi], series.rate_hint)
        )
    return windows


def _zero_crossings(x: np.ndarray) -> int:
    signs = np.sign(x - x.mean())
    signs = signs[signs != 0]
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


def extract_features(window: SensorSeries | np.ndarray) -> np.ndarray:
    """Eight statistics per channel, concatenated in channel order.

    Per channel: mean, population std, min, max, median, interquartile
    range, mean absolute first difference and the number of sign changes of
    the mean-centred signal.
    """
    data = window.channels if isinstance(window, SensorSeries) else np.asarray(window, float)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    if data.shape[0] == 0:
        raise DegenerateWindowError("cannot extract features from an empty window")
    feats = []
    for x in data.T:
        q25, q75 = np.percentile(x, [25, 75])
        feats.extend(
            [
                x.mean(),
                x.std(),
                x.min(),
                x.max(),
                np.median(x),
                q75 - q25,
                np.abs(np.diff(x)).mean() if x.size > 1 else 0.0,
                _zero_crossings(x),
            ]
        )
    return np.asarray(feats, dtype=np.float64)


def feature_names(n_channels: int) -> list[str]:
    return [f"ch{c + 1}_{s}" for c in range(n_channels) for s in STAT_NAMES]


@dataclass(frozen=True)
class CsvSchema:
    user: str = "user_id"
    session: str = "session"
    timestamp: str = "timestamp_s"
    channels: tuple[str, ...] | None = None  # None: every remaining column


def load_csv(
    path, schema: CsvSchema | None = None, rate_hint: float | None = None
) -> dict[tuple[str, str], SensorSeries]:
    """Read a raw sensor CSV into one series per ``(user, session)``.

    Rows within a group are sorted by timestamp (stable for equal stamps).
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        channels = schema.channels or tuple(
            h for h in header if h not in (schema.user, schema.session, schema.timestamp)
        )
        required = (schema.user, schema.session, schema.timestamp, *channels)
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        if not channels:
            raise SchemaError(f"{path}: no channel columns")
        idx = {c: header.index(c) for c in required}
        groups: dict[tuple[str, str], list[list[float]]] = defaultdict(list)
        # header is row 1, so data rows start at 2
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise CsvParseError(f"expected {len(header)} fields, got {len(row)}", rowno)
            key = (row[idx[schema.user]].strip(), row[idx[schema.session]].strip())
            values = []
            for col in (schema.timestamp, *channels):
                cell = row[idx[col]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvParseError(f"non-numeric value {cell!r} in column {col}", rowno) from None
                if not math.isfinite(v):
                    raise CsvParseError(f"non-finite value {cell!r} in column {col}", rowno)
                values.append(v)
            groups[key].append(values)

    out = {}
    for key in sorted(groups):
        arr = np.asarray(groups[key], dtype=np.float64)
        order = np.argsort(arr[:, 0], kind="stable")
        arr = arr[order]
        out[key] = SensorSeries(arr[:, 0], arr[:, 1:], rate_hint)
    return out


def series_to_features(
    series: Mapping[tuple[str, str], SensorSeries], spec: WindowSpec
) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for key, s in series.items():
        wins = [w for w in sliding_windows(s, spec) if len(w)]
        dim = s.n_channels * N_STATS
        out[key] = (
            np.vstack([extract_features(w) for w in wins]) if wins else np.empty((0, dim))
        )
    return out


def build_user_datasets(
    features: Mapping[tuple[str, str], np.ndarray],
    train_session: str | None = None,
    test_session: str | None = None,
) -> list[UserDataset]:
    """Pair each user's training and testing sessions into a UserDataset.

    Without explicit session names the lexicographically first session is the
    training session and the second the testing session. Users lacking either
    session are skipped.
    """
    by_user: dict[str, dict[str, np.ndarray]] = defaultdict(dict)
    for (user, session), X in features.items():
        by_user[user][session] = X
    users = []
    for user in sorted(by_user):
        sessions = by_user[user]
        names = sorted(sessions)
        tr = train_session if train_session is not None else (names[0] if names else None)
        te = test_session if test_session is not None else (names[1] if len(names) > 1 else None)
        if tr not in sessions or te not in sessions or not len(sessions[tr]):
            continue
        users.append(UserDataset(user, sessions[tr], sessions[te]))
    if not users:
        raise InsufficientDataError("no user has both a training and a testing session")
    return users


def write_feature_csv(path, features: Mapping[tuple[str, str], np.ndarray]) -> None:
    dims = {X.shape[1] for X in features.values()}
    if len(dims) > 1:
        raise SchemaError(f"feature blocks disagree on dimension: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "session", *[f"f{i + 1}" for i in range(dim)]])
        for (user, session) in sorted(features):
            for row in features[(user, session)]:
                w.writerow([user, session, *[repr(float(v)) for v in row]])


def read_feature_csv(path) -> dict[tuple[str, str], np.ndarray]:
    rows: dict[tuple[str, str], list[list[float]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["user_id", "session"] or len(header) < 3:
            raise SchemaError(f"{path}: expected header user_id,session,f1,...")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise CsvParseError(str(exc), rowno) from None
            if len(vals) != len(header) - 2:
                raise CsvParseError(f"expected {len(header) - 2} features", rowno)
            rows[(row[0], row[1])].append(vals)
    return {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}


def write_points_csv(path, X: np.ndarray, columns: Sequence[str] | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    columns = list(columns or [f"x{i + 1}" for i in range(X.shape[1])])
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in X:
            w.writerow([repr(float(v)) for v in row])
