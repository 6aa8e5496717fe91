"""Per-user continuous-authentication protocol and error-rate metrics.

For every user, preprocessing and models are fitted on that user's genuine
training session only. Test-session genuine samples and a fixed number of
samples borrowed from other users' test sessions are then scored, and
FAR/FRR/HTER are read off at a threshold taken from the genuine training
scores. All rates are percentages.

The genuine training scores behind thresholds and normalizer calibration are
k-fold cross-validated: each enrolment sample is scored by a model fitted on
the other folds. Resubstituted scores are optimistic for kernel methods,
whose training points sit on their own kernel bump.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .classifiers import ClassifierConfig, OccKind, fit_pipeline
from .classifiers.base import ALL_KINDS
from .core import (
    InsufficientDataError,
    OccAuthError,
    ParameterError,
    UserDataset,
    check_common_dim,
    child_seed,
    make_rng,
)
from .fusion import (
    METHODS,
    calibrate_beta,
    enumerate_fusions,
    fit_stacker,
    fuse_scores,
    fusion_name,
    log_mean_logistic,
    normalize,
    vote_threshold,
)

log = logging.getLogger(__name__)

THREADS_ENV = "OCC_AUTH_THREADS"
LEVELS = ("single", "score", "decision", "stack")


class ProtocolError(OccAuthError, RuntimeError):
    """A module failed while evaluating one user; names both."""

    def __init__(self, user, module: str, cause: Exception):
        super().__init__(f"user {user!r}, {module}: {type(cause).__name__}: {cause}")
        self.user, self.module, self.cause = user, module, cause


# metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "genuine", np.asarray(self.genuine, dtype=np.float64).ravel())
        object.__setattr__(self, "impostor", np.asarray(self.impostor, dtype=np.float64).ravel())

    def check(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InsufficientDataError("score set needs genuine and impostor scores")


def select_threshold(genuine_train_scores, q: float = 0.05) -> float:
    """Empirical ``q``-quantile of genuine training scores (linear interpolation)."""
    s = np.asarray(genuine_train_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise InsufficientDataError("cannot select a threshold from zero scores")
    if not 0.0 <= q < 1.0:
        raise ParameterError(f"threshold quantile must lie in [0, 1), got {q}")
    return float(np.quantile(s, q))


def confusion_rates(s: ScoreSet, theta: float) -> tuple[float, float]:
    """(FAR, FRR) in percent; a score equal to ``theta`` is accepted."""
    s.check()
    far = 100.0 * np.count_nonzero(s.impostor >= theta) / s.impostor.size
    frr = 100.0 * np.count_nonzero(s.genuine < theta) / s.genuine.size
    return float(far), float(frr)


def hter(far: float, frr: float) -> float:
    return (far + frr) / 2.0


def auc(s: ScoreSet) -> float:
    """Mann-Whitney AUC in percent: P(genuine > impostor) + 1/2 P(tie)."""
    s.check()
    ng, ni = s.genuine.size, s.impostor.size
    ranks = rankdata(np.concatenate([s.genuine, s.impostor]))
    u = ranks[:ng].sum() - ng * (ng + 1) / 2.0
    return float(100.0 * u / (ng * ni))


def det_thresholds(scores: np.ndarray, n_points: int) -> np.ndarray:
    """``n_points`` thresholds from accept-all to reject-all over ``scores``."""
    if n_points < 2:
        raise ParameterError("a DET sweep needs at least two points")
    lo, hi = float(np.min(scores)), float(np.max(scores))
    th = np.linspace(lo, hi, n_points)
    th[-1] = np.nextafter(hi, np.inf)
    return th


def det_curve(s: ScoreSet, n_points: int = 101, thresholds=None) -> np.ndarray:
    """Rows ``(theta, FAR, FRR)``; FAR falls and FRR rises along the sweep."""
    s.check()
    th = (det_thresholds(np.concatenate([s.genuine, s.impostor]), n_points)
          if thresholds is None else np.asarray(thresholds, dtype=np.float64))
    g, i = np.sort(s.genuine), np.sort(s.impostor)
    far = 100.0 * (i.size - np.searchsorted(i, th, side="left")) / i.size
    frr = 100.0 * np.searchsorted(g, th, side="left") / g.size
    return np.column_stack([th, far, frr])


# protocol ------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """One evaluated system: a single classifier, a fusion or the stacker."""

    members: tuple[OccKind, ...]
    level: str = "single"

    def __post_init__(self):
        members = tuple(OccKind.parse(m) for m in self.members)
        object.__setattr__(self, "members", members)
        if self.level not in LEVELS:
            raise ParameterError(f"unknown level {self.level!r}")
        if self.level == "single" and len(members) != 1:
            raise ParameterError("a single-classifier method has exactly one member")
        if self.level in ("score", "decision") and not 2 <= len(members) <= 4:
            raise ParameterError("fusion needs between two and four members")
        if self.level == "stack" and len(members) < 1:
            raise ParameterError("stacking needs members")

    @property
    def name(self) -> str:
        if self.level == "single":
            return self.members[0].name
        tag = {"score": "score", "decision": "vote", "stack": "stack"}[self.level]
        return f"{fusion_name(self.members)}[{tag}]"

    @classmethod
    def single(cls, kind) -> "MethodSpec":
        return cls((OccKind.parse(kind),), "single")


def standard_methods(kinds: Sequence[OccKind] = ALL_KINDS, fusion_levels: Sequence[str] = (),
                     stacker: bool = False) -> list[MethodSpec]:
    methods = [MethodSpec.single(k) for k in kinds]
    for level in fusion_levels:
        methods += [MethodSpec(m, level) for m in enumerate_fusions(ALL_KINDS)]
    if stacker:
        methods.append(MethodSpec(ALL_KINDS, "stack"))
    return methods


@dataclass(frozen=True)
class ProtocolConfig:
    impostors_per_user: int | None = None  # None: 10x the user's genuine test count
    threshold_quantile: float = 0.05
    seed: int = 0
    norm: str = "logistic"
    det_points: int = 101
    threads: int | None = None
    calibration_folds: int = 5  # < 2: use resubstitution training scores

    def __post_init__(self):
        if self.impostors_per_user is not None and self.impostors_per_user < 1:
            raise ParameterError("impostors_per_user must be positive")
        if not 0.0 <= self.threshold_quantile < 1.0:
            raise ParameterError("threshold_quantile must lie in [0, 1)")
        if self.norm not in METHODS:
            raise ParameterError(f"unknown normalizer {self.norm!r}")


def n_threads(pc: ProtocolConfig) -> int:
    if pc.threads is not None:
        return max(1, int(pc.threads))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParameterError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return min(4, os.cpu_count() or 1)


def borrow_impostors(datasets: Sequence[UserDataset], u: int, count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Round-robin draw without replacement from the other users' test sessions."""
    pools = []
    for v, d in enumerate(datasets):
        if v != u and d.test_genuine.shape[0]:
            pools.append(d.test_genuine[rng.permutation(d.test_genuine.shape[0])])
    dim = datasets[u].dim
    if not pools:
        return np.empty((0, dim))
    picked, depth = [], 0
    while len(picked) < count and any(depth < p.shape[0] for p in pools):
        for p in pools:
            if depth < p.shape[0] and len(picked) < count:
                picked.append(p[depth])
        depth += 1
    return np.asarray(picked).reshape(-1, dim)


@dataclass(frozen=True)
class MemberScores:
    train: np.ndarray
    genuine: np.ndarray
    impostor: np.ndarray


@dataclass(frozen=True)
class UserScores:
    user_id: Hashable
    members: Mapping[OccKind, MemberScores]
    n_impostors: int


def validation_scores(kind, X: np.ndarray, config: ClassifierConfig, folds: int,
                      rng: np.random.Generator, full=None) -> np.ndarray:
    """Cross-validated genuine scores of the enrolment samples ``X``.

    Falls back to the full model's own training scores when ``folds < 2`` or
    a fold is too small to fit.
    """
    n = X.shape[0]
    fallback = full.training_scores.copy() if full is not None else None
    if folds < 2 or n < 2 * folds:
        if fallback is None:
            raise InsufficientDataError("no model to take resubstitution scores from")
        return fallback
    assign = np.arange(n) % folds
    assign = assign[rng.permutation(n)]
    out = np.empty(n)
    for f in range(folds):
        held = assign == f
        try:
            pipe = fit_pipeline(kind, X[~held], config, seed=child_seed(rng))
        except OccAuthError as exc:
            if fallback is None:
                raise
            log.warning("%s: cross-validation fold failed (%s); using training scores", kind.name, exc)
            return fallback
        out[held] = pipe.score_samples(X[held])
    return out


def _score_user(datasets, u, kinds, config: ClassifierConfig, pc: ProtocolConfig) -> UserScores:
    d = datasets[u]
    count = pc.impostors_per_user or 10 * d.test_genuine.shape[0]
    impostors = borrow_impostors(datasets, u, count, make_rng(pc.seed, u, 0))
    model_rng = make_rng(pc.seed, u, 1)
    members = {}
    for kind in kinds:
        seed = child_seed(model_rng)
        try:
            pipe = fit_pipeline(kind, d.train_genuine, config, seed=seed)
            train = validation_scores(kind, d.train_genuine, config, pc.calibration_folds,
                                      make_rng(seed, 4), full=pipe)
            members[kind] = MemberScores(
                train,
                pipe.score_samples(d.test_genuine),
                pipe.score_samples(impostors),
            )
        except OccAuthError as exc:
            raise ProtocolError(d.user_id, f"classifiers/{kind.name}", exc) from exc
    return UserScores(d.user_id, members, impostors.shape[0])


def score_users(datasets: Sequence[UserDataset], kinds: Sequence[OccKind],
                config: ClassifierConfig = ClassifierConfig(),
                pc: ProtocolConfig = ProtocolConfig()) -> tuple[list[UserScores], list]:
    """Fit every member classifier per user and score test genuine/impostor data.

    Returns the scored users (in input order) and the excluded user ids.
    """
    if len(datasets) < 2:
        raise InsufficientDataError("the protocol needs at least two users")
    check_common_dim(datasets)
    kinds = tuple(OccKind.parse(k) for k in kinds)
    ok = [u for u, d in enumerate(datasets) if d.test_genuine.shape[0] > 0]
    excluded = [d.user_id for d in datasets if d.test_genuine.shape[0] == 0]
    for uid in excluded:
        log.warning("user %r has no test data and is excluded", uid)
    if len(ok) < 2:
        raise InsufficientDataError("fewer than two users have test data")
    with ThreadPoolExecutor(max_workers=n_threads(pc)) as pool:
        scored = list(pool.map(lambda u: _score_user(datasets, u, kinds, config, pc), ok))
    return scored, excluded


@dataclass(frozen=True)
class UserMetrics:
    far: float
    frr: float
    hter: float
    auc: float
    theta: float

    @property
    def auc_from_hter(self) -> float:
        return 100.0 - self.hter


@dataclass
class EvalReport:
    method: str
    per_user: dict = field(default_factory=dict)  # user -> UserMetrics
    score_sets: dict = field(default_factory=dict)  # user -> ScoreSet
    det: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    excluded: list = field(default_factory=list)

    @property
    def users(self) -> list:
        return list(self.per_user)

    def hters(self) -> np.ndarray:
        return np.array([m.hter for m in self.per_user.values()])

    @property
    def aggregate(self) -> UserMetrics:
        ms = list(self.per_user.values())
        far = float(np.mean([m.far for m in ms]))
        frr = float(np.mean([m.frr for m in ms]))
        return UserMetrics(far, frr, hter(far, frr), float(np.mean([m.auc for m in ms])), float("nan"))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "far", "frr", "hter", "auc", "auc_100_minus_hter", "theta"])
            for uid, m in self.per_user.items():
                w.writerow([uid, *_fmt(m.far, m.frr, m.hter, m.auc, m.auc_from_hter, m.theta)])
            a = self.aggregate
            w.writerow(["mean", *_fmt(a.far, a.frr, a.hter, a.auc, a.auc_from_hter), ""])

    def write_det_csv(self, path) -> None:
        write_det_csv(path, self.det)


def _fmt(*values) -> list[str]:
    return [repr(float(v)) for v in values]


def write_det_csv(path, det: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "far", "frr"])
        for row in det:
            w.writerow(_fmt(*row))


def read_report_csv(path, method: str | None = None) -> EvalReport:
    """Per-user rows of a report CSV (the aggregate row is recomputed)."""
    rep = EvalReport(method or os.path.splitext(os.path.basename(str(path)))[0])
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["user_id"] == "mean":
                continue
            rep.per_user[row["user_id"]] = UserMetrics(
                float(row["far"]), float(row["frr"]), float(row["hter"]), float(row["auc"]),
                float(row["theta"]) if row.get("theta") else float("nan"),
            )
    return rep


def _normalized(ms: MemberScores, norm: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cfg = calibrate_beta(ms.train, norm)
    return normalize(ms.train, cfg), normalize(ms.genuine, cfg), normalize(ms.impostor, cfg)


def method_scores(us: UserScores, method: MethodSpec, pc: ProtocolConfig) -> tuple[ScoreSet, float]:
    """Test ScoreSet and threshold for one user under ``method``."""
    q = pc.threshold_quantile
    ms = [us.members[k] for k in method.members]
    if method.level == "single":
        m = ms[0]
        return ScoreSet(m.genuine, m.impostor), select_threshold(m.train, q)
    if method.level == "score":
        parts = [_normalized(m, pc.norm) for m in ms]
        theta = select_threshold(fuse_scores([p[0] for p in parts]), q)
        if pc.norm == "softsign":
            return ScoreSet(fuse_scores([p[1] for p in parts]), fuse_scores([p[2] for p in parts])), theta
        # logistic and tanh saturate in float64; rank by log(mean expit) instead,
        # which orders samples like the mean but keeps far-out scores distinct
        k = 1.0 if pc.norm == "logistic" else 2.0
        cfgs = [calibrate_beta(m.train, pc.norm) for m in ms]

        def log_fused(attr):
            return log_mean_logistic([k * c.beta * (getattr(m, attr) - c.offset) for m, c in zip(ms, cfgs)])

        p_theta = theta if pc.norm == "logistic" else (theta + 1.0) / 2.0
        with np.errstate(divide="ignore"):
            theta = float(np.log(p_theta))
        return ScoreSet(log_fused("genuine"), log_fused("impostor")), theta
    if method.level == "decision":
        thetas = [select_threshold(m.train, q) for m in ms]
        gen = np.mean([m.genuine >= t for m, t in zip(ms, thetas)], axis=0)
        imp = np.mean([m.impostor >= t for m, t in zip(ms, thetas)], axis=0)
        return ScoreSet(gen, imp), vote_threshold(len(ms))
    # stack: a one-class SVM over the vectors of normalized member scores
    parts = [_normalized(m, pc.norm) for m in ms]
    train = np.column_stack([p[0] for p in parts])
    stacker = fit_stacker(train)
    gen = stacker.score_samples(np.column_stack([p[1] for p in parts]))
    imp = stacker.score_samples(np.column_stack([p[2] for p in parts]))
    return ScoreSet(gen, imp), select_threshold(stacker.training_scores, q)


def evaluate_method(scored: Sequence[UserScores], method: MethodSpec,
                    pc: ProtocolConfig = ProtocolConfig(), excluded=()) -> EvalReport:
    rep = EvalReport(method.name, excluded=list(excluded))
    for us in scored:
        if us.n_impostors == 0:
            rep.excluded.append(us.user_id)
            continue
        try:
            s, theta = method_scores(us, method, pc)
        except OccAuthError as exc:
            raise ProtocolError(us.user_id, f"fusion/{method.name}", exc) from exc
        far, frr = confusion_rates(s, theta)
        rep.per_user[us.user_id] = UserMetrics(far, frr, hter(far, frr), auc(s), theta)
        rep.score_sets[us.user_id] = s
    if not rep.per_user:
        raise InsufficientDataError("no user could be evaluated")
    pooled = np.concatenate([np.concatenate([s.genuine, s.impostor]) for s in rep.score_sets.values()])
    th = det_thresholds(pooled, pc.det_points)
    curves = [det_curve(s, thresholds=th) for s in rep.score_sets.values()]
    rep.det = np.column_stack([th, np.mean([c[:, 1] for c in curves], axis=0),
                               np.mean([c[:, 2] for c in curves], axis=0)])
    return rep


def run_protocols(datasets: Sequence[UserDataset], methods: Sequence[MethodSpec],
                  config: ClassifierConfig = ClassifierConfig(),
                  pc: ProtocolConfig = ProtocolConfig()) -> tuple[dict[str, EvalReport], list[UserScores]]:
    """Evaluate several methods, fitting each member classifier once per user."""
    kinds = [k for k in ALL_KINDS if any(k in m.members for m in methods)]
    scored, excluded = score_users(datasets, kinds, config, pc)
    reports = {m.name: evaluate_method(scored, m, pc, excluded) for m in methods}
    return reports, scored


def run_protocol(datasets: Sequence[UserDataset], method, config: ClassifierConfig = ClassifierConfig(),
                 pc: ProtocolConfig = ProtocolConfig()) -> EvalReport:
    if not isinstance(method, MethodSpec):
        method = MethodSpec.single(method)
    reports, _ = run_protocols(datasets, [method], config, pc)
    return reports[method.name]


@dataclass(frozen=True)
class SearchResult:
    params: Mapping[str, object]
    hter: float
    auc: float


def grid_search(datasets: Sequence[UserDataset], kind, grid: Mapping[str, Sequence],
                config: ClassifierConfig = ClassifierConfig(),
                pc: ProtocolConfig = ProtocolConfig()) -> list[SearchResult]:
    """Aggregate HTER of ``kind`` for every combination of ``grid`` values.

    ``grid`` maps parameter names of the classifier's params dataclass to
    candidate values. Results come back best first. Each candidate is scored
    with the full protocol, impostors included, so this measures sensitivity
    rather than tuning anything from enrolment data alone.
    """
    kind = OccKind.parse(kind)
    base = config.params_for(kind)
    field_name = {OccKind.SV1C: "sv1c", OccKind.EE: "ee", OccKind.IF: "iforest", OccKind.LOF: "lof"}[kind]
    names = list(grid)
    out = []
    for values in itertools.product(*(grid[n] for n in names)):
        chosen = dict(zip(names, values))
        try:
            params = dataclasses.replace(base, **chosen)
        except TypeError as exc:
            raise ParameterError(f"{kind.name}: {exc}") from None
        cfg = dataclasses.replace(config, **{field_name: params})
        agg = run_protocol(datasets, kind, cfg, pc).aggregate
        out.append(SearchResult(chosen, agg.hter, agg.auc))
    out.sort(key=lambda r: (r.hter, -r.auc))
    return out
