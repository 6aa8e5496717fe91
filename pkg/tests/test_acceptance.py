"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear
even when output capture is on.
"""

import time
from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from scipy import ndimage

from occauth.classifiers import (
    EeModel,
    EeParams,
    IfParams,
    LofParams,
    Sv1cParams,
    decision_grid,
    fit_ee,
    fit_iforest,
    fit_lof,
    fit_sv1c,
)
from occauth.classifiers.ee import fast_mcd, subset_size
from occauth.cli import main
from occauth.datastream import Mode, SynthSpec, bimodal_spec, generate_synthetic
from occauth.evaluation import (
    MethodSpec,
    ProtocolConfig,
    hter,
    run_protocols,
    standard_methods,
)
from occauth.fusion import NormalizerConfig, normalize
from occauth.stats import pairwise_battery, wilcoxon_signed_rank

from oracles import lof_bruteforce, mcd_exhaustive_det, wilcoxon_enumeration_p, zero_crossings

# (FAR, FRR, HTER, AUC) rows of a published 13-method x 4-dataset error table
PUBLISHED_ROWS = [
    (4.58, 20.27, 12.42, 87.58), (2.24, 24.34, 13.29, 86.71), (2.56, 25.38, 13.97, 86.03), (8.33, 13.41, 10.87, 89.13),
    (1.96, 27.86, 14.91, 85.09), (1.28, 25.47, 13.38, 86.62), (2.88, 28.76, 15.82, 84.18), (9.79, 11.04, 10.42, 89.58),
    (13.07, 1.48, 7.28, 92.72), (7.56, 3.99, 5.78, 94.22), (7.95, 8.71, 8.33, 91.67), (14.02, 3.87, 8.94, 91.06),
    (10.78, 3.81, 7.30, 92.70), (6.47, 8.69, 7.58, 92.42), (6.28, 12.61, 9.45, 90.55), (18.52, 5.38, 11.95, 88.05),
    (6.21, 7.09, 6.65, 93.35), (4.62, 17.33, 10.97, 89.03), (6.47, 23.41, 14.94, 85.06), (12.04, 7.91, 9.97, 90.03),
    (7.52, 7.61, 7.56, 92.44), (3.40, 18.75, 11.07, 88.93), (4.17, 22.17, 13.17, 86.83), (15.08, 6.72, 10.90, 89.10),
    (2.29, 14.62, 8.45, 91.55), (0.58, 26.58, 13.58, 86.42), (1.47, 25.66, 13.57, 86.43), (7.80, 12.06, 9.93, 90.07),
    (14.05, 2.50, 8.28, 91.72), (3.21, 10.03, 6.62, 93.38), (4.49, 15.10, 9.79, 90.21), (18.12, 3.04, 10.58, 89.42),
    (7.03, 14.65, 10.84, 89.16), (9.01, 13.01, 11.01, 88.99), (11.83, 16.45, 14.14, 85.86), (11.71, 9.48, 10.59, 89.41),
    (6.70, 17.78, 12.24, 87.76), (18.46, 11.72, 15.09, 84.91), (18.75, 11.86, 15.31, 84.69), (12.83, 10.89, 11.86, 88.14),
    (17.16, 25.15, 21.15, 78.85), (16.25, 22.35, 19.30, 80.70), (12.56, 21.28, 16.92, 83.08), (15.15, 24.56, 19.85, 80.15),
    (14.05, 27.43, 20.74, 79.26), (19.26, 14.38, 16.82, 83.18), (23.62, 20.14, 21.88, 78.12), (15.28, 15.54, 15.41, 84.59),
    (8.17, 13.61, 10.89, 89.11), (7.37, 17.29, 12.33, 87.67), (10.58, 17.83, 14.20, 85.80), (11.51, 9.24, 10.37, 89.63),
]


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def benchmark_run(benchmark):
    methods = standard_methods(fusion_levels=("score",))
    methods.append(MethodSpec(("lof", "lof"), "score"))
    t0 = time.perf_counter()
    reports, scored = run_protocols(benchmark, methods)
    return reports, scored, time.perf_counter() - t0


def test_01_hter_arithmetic(report):
    t0 = time.perf_counter()
    worst = max(abs(hter(far, frr) - h) for far, frr, h, _ in PUBLISHED_ROWS)
    spots = [hter(4.58, 20.27), hter(11.71, 9.48), hter(14.05, 2.50)]
    spots_ok = all(abs(s - e) <= 0.005 + 1e-9 for s, e in zip(spots, (12.42, 10.59, 8.28)))
    elapsed = time.perf_counter() - t0
    ok = len(PUBLISHED_ROWS) == 52 and worst <= 0.005 + 1e-9 and spots_ok and elapsed < 1
    report(1, "HTER arithmetic", ok, f"52 rows, max |error| {worst:.4f}, {elapsed * 1e3:.1f} ms")


def test_02_nu_property(report):
    t0 = time.perf_counter()
    worst = -np.inf
    for nu, seed in product((0.05, 0.1, 0.2), range(10)):
        X, _ = generate_synthetic(SynthSpec("unimodal", 500, (Mode(np.zeros(2), np.eye(2)),), seed=seed))
        m = fit_sv1c(X, Sv1cParams(nu=nu))
        frac = np.mean(m.training_scores < 0)
        worst = max(worst, frac - (nu + 3 / np.sqrt(500)))
    elapsed = time.perf_counter() - t0
    report(2, "nu bounds the training outlier fraction", worst <= 0 and elapsed < 30,
           f"max excess over bound {worst:+.4f}, {elapsed:.1f} s")


def test_03_lof_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for n, k in product((20, 100, 200), (3, 10)):
        rng = np.random.default_rng(n * 100 + k)
        train, queries = rng.normal(size=(n, 3)), rng.normal(size=(25, 3)) * 1.5
        m = fit_lof(train, LofParams(k_neighbors=k))
        got = m.local_outlier_factor(queries)
        worst = max(worst, np.abs(got - lof_bruteforce(train, queries, k)).max())
    elapsed = time.perf_counter() - t0
    report(3, "LOF equals brute-force oracle", worst <= 1e-9 and elapsed < 10,
           f"max |diff| {worst:.2e}, {elapsed:.1f} s")


def test_04_mcd_oracle(report):
    t0 = time.perf_counter()
    worst, exhaustive_used = 0.0, False
    for seed in range(3):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(size=(16, 2)), rng.normal(size=(4, 2)) * 0.5 + 6])
        h = subset_size(20, 2, EeParams().support_fraction)
        res = fast_mcd(X, h, seed=seed)
        exhaustive_used |= res.exhaustive
        best = mcd_exhaustive_det(X, h)
        worst = max(worst, abs(res.det - best) / best)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and not exhaustive_used and elapsed < 30
    report(4, "FAST-MCD reaches the exhaustive optimum", ok, f"max rel. gap {worst:.1e}, {elapsed:.1f} s")


def test_05_mahalanobis(report):
    m = EeModel(EeParams(), np.zeros(2), np.eye(2), training_scores=np.array([0.0]))
    d = float(m.mahalanobis([[3.0, 4.0]])[0])
    report(5, "Mahalanobis distance of (3,4) is 5", abs(d - 5.0) <= 1e-12, f"{d!r}")


def test_06_bimodal_boundaries(report):
    t0 = time.perf_counter()
    spec = bimodal_spec(seed=0)
    X, _ = generate_synthetic(spec)
    centroids = np.array([m.mean for m in spec.modes])
    midpoint = centroids.mean(axis=0)

    ee = fit_ee(X)
    grid = decision_grid(ee, ((-20, 20), (-14, 14)), 300)
    accept = grid.values >= 0
    cell = (grid.xs[1] - grid.xs[0]) * (grid.ys[1] - grid.ys[0])
    area = accept.sum() * cell
    _, n_regions = ndimage.label(accept)
    d = ee.mahalanobis(zero_crossings(grid))
    border_clear = not (accept[0].any() or accept[-1].any() or accept[:, 0].any() or accept[:, -1].any())
    disc_area = 2 * np.pi * 2.0**2
    ee_ok = n_regions == 1 and area > 2 * disc_area and d.max() <= 1.05 * d.min() and border_clear

    others = {}
    for name, m in (("SV1C", fit_sv1c(X)), ("IF", fit_iforest(X, IfParams(seed=0)))):
        mid, cents = m.score(midpoint), m.score_samples(centroids)
        others[name] = bool(mid < cents.min())
    elapsed = time.perf_counter() - t0
    ok = ee_ok and all(others.values()) and elapsed < 60
    report(6, "bimodal: EE one ellipse, SV1C and IF split the modes", ok,
           f"EE regions {n_regions}, area {area:.1f} vs {2 * disc_area:.1f}, "
           f"midpoint below centroids {others}, {elapsed:.1f} s")


def test_07_end_to_end(report, benchmark_run):
    reports, _, elapsed = benchmark_run
    singles = ["SV1C", "EE", "IF", "LOF"]
    fusions = [n for n in reports if n.endswith("[score]") and n != "LOF+LOF[score]"]
    best = min(fusions, key=lambda n: reports[n].aggregate.hter)
    rows = {n: (reports[n].aggregate.hter, reports[n].aggregate.auc) for n in singles + [best]}
    ok = all(h <= 5 and a >= 97 for h, a in rows.values()) and elapsed < 120
    detail = ", ".join(f"{n} {h:.2f}/{a:.2f}" for n, (h, a) in rows.items())
    report(7, "10-user benchmark HTER <= 5 and AUC >= 97", ok, f"HTER/AUC {detail}; {elapsed:.1f} s")


def test_08_fusion_sanity(report, benchmark_run):
    reports, _, _ = benchmark_run
    same = True
    for u, a in reports["LOF"].score_sets.items():
        b = reports["LOF+LOF[score]"].score_sets[u]
        sa = np.concatenate([a.genuine, a.impostor])
        sb = np.concatenate([b.genuine, b.impostor])
        same &= np.array_equal(np.argsort(sa, kind="stable"), np.argsort(sb, kind="stable"))
    det = reports["SV1C+EE+IF+LOF[score]"].det
    monotone = bool(np.all(np.diff(det[:, 0]) > 0) and np.all(np.diff(det[:, 1]) <= 0)
                    and np.all(np.diff(det[:, 2]) >= 0))
    report(8, "self-fusion keeps ranking, 4-member DET monotone", same and monotone,
           f"ranking identical {same}, DET points {det.shape[0]} monotone {monotone}")


def test_09_normalizers(report):
    ids = [
        abs(normalize(0.0, NormalizerConfig("logistic", 1.0)) - 0.5),
        abs(normalize(0.0, NormalizerConfig("tanh", 1.0)) - 0.0),
        abs(normalize(1.0, NormalizerConfig("softsign")) - 0.5),
    ]
    rng = np.random.default_rng(2024)
    bad = 0
    for beta, spread in zip(np.exp(rng.uniform(-4, 4, 10_000)), np.exp(rng.uniform(-3, 3, 10_000))):
        s = np.sort(rng.normal(scale=spread, size=8))
        for method in ("logistic", "tanh", "softsign"):
            bad += int(np.any(np.diff(normalize(s, NormalizerConfig(method, beta))) < 0))
    ok = max(ids) <= 1e-12 and bad == 0
    report(9, "normalizer identities and monotonicity", ok,
           f"max identity error {max(ids):.1e}, 10^4 (beta, spread) pairs, {bad} violations")


def test_10_wilcoxon_exact(report):
    rng = np.random.default_rng(7)
    mismatches, cases = 0, 0
    for n in range(1, 13):
        for _ in range(8):
            # integer magnitudes force tied ranks in many draws
            d = rng.integers(1, 6, n) * rng.choice([-1, 1], n)
            cases += 1
            mismatches += wilcoxon_signed_rank(d).p_value != float(wilcoxon_enumeration_p(d))
        d = rng.normal(size=n)
        cases += 1
        mismatches += wilcoxon_signed_rank(d).p_value != float(wilcoxon_enumeration_p(d))
    p6 = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6]).p_value
    ok = mismatches == 0 and p6 == 0.03125 and Fraction(p6) == Fraction(1, 32)
    report(10, "exact Wilcoxon equals enumeration", ok, f"{cases} cases n<=12, {mismatches} mismatches, n=6 p={p6}")


def test_11_battery_shape(report, benchmark_run, tmp_path):
    reports, _, _ = benchmark_run
    singles = ["SV1C", "EE", "IF", "LOF"]
    pairs = [(a, b) for i, a in enumerate(singles) for b in singles[i + 1:]]
    rows = pairwise_battery({n: reports[n] for n in singles}, pairs)
    from occauth.stats import write_battery_csv

    write_battery_csv(tmp_path / "s.csv", rows)
    header = (tmp_path / "s.csv").read_text(encoding="utf-8").splitlines()[0]
    ps = [r.p_value for row in rows for r in (row.ks, row.wilcoxon, row.friedman) if r is not None]
    ok = (len(rows) == 6 and header.startswith("pair,ks_p,wilcoxon_p,friedman_p")
          and all(0 <= p <= 1 for p in ps) and all(r.label.count("-") == 1 for r in rows))
    report(11, "battery has pair/KS/Wilcoxon/Friedman columns, p in [0,1]", ok,
           f"{len(rows)} pairs, {len(ps)} p-values in [{min(ps):.3g}, {max(ps):.3g}]")


def test_12_determinism(report, tmp_path):
    t0 = time.perf_counter()
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--seed", "11", "--fusion", "all", "--out", str(o)]) for o in outs]
    files = sorted(p.name for p in outs[0].glob("*.csv"))
    same = files == sorted(p.name for p in outs[1].glob("*.csv")) and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and same and len(files) > 10 and elapsed < 120
    report(12, "two identical runs give byte-identical CSVs", ok, f"{len(files)} CSVs compared, {elapsed:.1f} s")


def test_13_genuine_only(report, monkeypatch):
    import occauth.evaluation as ev
    from occauth.datastream import make_user_benchmark

    users = make_user_benchmark(n_users=5, dim=6, n_train=30, n_test=20, seed=4)
    train_rows = {u.user_id: {r.tobytes() for r in u.train_genuine} for u in users}
    test_rows = {r.tobytes() for u in users for r in u.test_genuine}
    pipe_calls, stack_calls = [], []

    real_pipeline, real_stacker = ev.fit_pipeline, ev.fit_stacker

    def spy_pipeline(kind, X, *a, **kw):
        pipe_calls.append(np.array(X, copy=True))
        return real_pipeline(kind, X, *a, **kw)

    def spy_stacker(V, *a, **kw):
        stack_calls.append(np.array(V, copy=True))
        return real_stacker(V, *a, **kw)

    monkeypatch.setattr(ev, "fit_pipeline", spy_pipeline)
    monkeypatch.setattr(ev, "fit_stacker", spy_stacker)
    methods = standard_methods(fusion_levels=("score", "decision"), stacker=True)
    _, scored = run_protocols(users, methods, pc=ProtocolConfig(seed=1))

    leaked = 0
    for X in pipe_calls:
        rows = {r.tobytes() for r in X}
        leaked += len(rows & test_rows)
        # each fit sees rows of exactly one user's enrolment set
        leaked += int(not any(rows <= own for own in train_rows.values()))
    # stacker inputs hold one score vector per enrolment sample; impostor sets are 10x larger
    n_train = {u.train_genuine.shape[0] for u in users}
    for V in stack_calls:
        leaked += int(V.shape[0] not in n_train)
    ok = leaked == 0 and len(pipe_calls) > 0 and len(stack_calls) == len(scored)
    report(13, "no impostor vector reaches a fit call", ok,
           f"{len(pipe_calls)} classifier fits, {len(stack_calls)} stacker fits, {leaked} leaks")
