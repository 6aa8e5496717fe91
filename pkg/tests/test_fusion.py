import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occauth.classifiers import OccKind
from occauth.core import Decision, InsufficientDataError, ParameterError
from occauth.fusion import (
    LN19,
    DegenerateCalibrationWarning,
    IncompleteFusionError,
    NormalizerConfig,
    calibrate_beta,
    enumerate_fusions,
    fit_stacker,
    fuse_decisions,
    fuse_scores,
    fusion_name,
    log_mean_logistic,
    normalize,
    score_correlation,
    vote_threshold,
)

from oracles import pearson

A, R = Decision.ACCEPT, Decision.REJECT
betas = st.floats(0.01, 50.0)
raw = st.floats(-1e3, 1e3, allow_nan=False)


class TestNormalize:
    @pytest.mark.parametrize("beta", [0.1, 1.0, 7.5])
    def test_logistic_midpoint(self, beta):
        assert normalize(0.0, NormalizerConfig("logistic", beta)) == 0.5

    def test_tanh_and_softsign(self):
        assert normalize(0.0, NormalizerConfig("tanh", 3.0)) == 0.0
        assert normalize(1.0, NormalizerConfig("softsign")) == 0.5

    def test_logistic_against_high_precision(self):
        mpmath.mp.dps = 50
        expect = float(1 / (1 + mpmath.exp(-2)))
        assert normalize(1.0, NormalizerConfig("logistic", 2.0)) == pytest.approx(expect, abs=1e-15)
        assert expect == pytest.approx(0.8808, abs=5e-5)

    def test_tanh_matches_logistic_form(self, rng):
        s = rng.normal(size=50) * 3
        direct = 2 / (1 + np.exp(-2 * 1.3 * s)) - 1
        np.testing.assert_allclose(normalize(s, NormalizerConfig("tanh", 1.3)), direct, atol=1e-14)

    def test_offset_applied(self):
        assert normalize(4.0, NormalizerConfig("logistic", 1.0, offset=4.0)) == 0.5

    @pytest.mark.parametrize("method", ["logistic", "tanh", "softsign"])
    @given(beta=betas, a=raw, b=raw)
    def test_monotone(self, method, beta, a, b):
        cfg = NormalizerConfig(method, beta)
        lo, hi = sorted((a, b))
        if lo < hi and hi - lo > 1e-6 * max(1.0, abs(hi)):
            na, nb = normalize(lo, cfg), normalize(hi, cfg)
            assert na <= nb
            if abs(beta * hi) < 15 and abs(beta * lo) < 15:
                assert na < nb

    @pytest.mark.parametrize("method,lo,hi", [("logistic", 0, 1), ("tanh", -1, 1), ("softsign", -1, 1)])
    def test_bounded(self, method, lo, hi):
        out = normalize(np.array([-1e300, -5.0, 0.0, 5.0, 1e300]), NormalizerConfig(method, 2.0))
        assert np.all((out >= lo) & (out <= hi))

    def test_invalid(self):
        with pytest.raises(ParameterError):
            NormalizerConfig("minmax")
        with pytest.raises(ParameterError):
            NormalizerConfig("logistic", 0.0)

    def test_decision_sets_invariant(self, rng):
        s = rng.normal(size=200)
        theta = 0.3
        cfg = NormalizerConfig("logistic", 1.7)
        np.testing.assert_array_equal(s >= theta, normalize(s, cfg) >= normalize(theta, cfg))


class TestCalibration:
    def test_unit_spread(self):
        # 21 evenly spaced scores: median 0, interpolated 95th percentile 0.9 * (1 / 0.9) = 1
        s = np.linspace(-1, 1, 21) / 0.9
        cfg = calibrate_beta(s)
        assert cfg.offset == pytest.approx(0.0, abs=1e-15)
        assert cfg.beta == pytest.approx(math.log(19), rel=1e-12)
        assert normalize(1.0, cfg) == pytest.approx(0.95, abs=1e-12)

    def test_ln19_solves_the_anchor(self):
        assert 1 / (1 + math.exp(-LN19)) == pytest.approx(0.95, abs=1e-15)

    def test_identical_scores_warn(self):
        with pytest.warns(DegenerateCalibrationWarning):
            cfg = calibrate_beta([2.0] * 10)
        assert cfg.beta == 1.0

    def test_scale_covariance(self, rng):
        s = rng.normal(size=300)
        a, b = calibrate_beta(s), calibrate_beta(10 * s)
        assert a.beta == pytest.approx(10 * b.beta)
        np.testing.assert_allclose(normalize(s, a), normalize(10 * s, b), atol=1e-12)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            calibrate_beta([1.0])


class TestScoreFusion:
    def test_constants(self):
        assert fuse_scores([0.5, 0.5, 0.5]) == 0.5
        assert fuse_scores([0.2, 0.8]) == 0.5

    def test_missing_member(self):
        with pytest.raises(IncompleteFusionError):
            fuse_scores([0.2, None])

    def test_self_fusion_keeps_ranking(self, rng):
        s = rng.normal(size=100)
        np.testing.assert_array_equal(np.argsort(fuse_scores([s, s]), kind="stable"),
                                      np.argsort(s, kind="stable"))

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=4))
    def test_within_range(self, xs):
        f = fuse_scores(xs)
        assert min(xs) - 1e-12 <= f <= max(xs) + 1e-12

    def test_weights(self):
        assert fuse_scores([0.0, 1.0], weights=[1, 3]) == pytest.approx(0.75)
        with pytest.raises(ParameterError):
            fuse_scores([0.0, 1.0], weights=[1])


class TestLogMeanLogistic:
    def test_matches_high_precision(self, rng):
        mpmath.mp.dps = 60
        Z = rng.normal(scale=20, size=(3, 40))
        got = log_mean_logistic(Z)
        for j in range(Z.shape[1]):
            expect = mpmath.log(sum(1 / (1 + mpmath.exp(-mpmath.mpf(z))) for z in Z[:, j]) / 3)
            assert got[j] == pytest.approx(float(expect), rel=1e-13, abs=1e-300)

    def test_self_fusion_keeps_order(self, rng):
        z = rng.uniform(-2000, 700, size=200)
        z = np.concatenate([z, np.linspace(-1, 1, 101)])
        z.sort()
        f = log_mean_logistic([z, z])
        assert np.all(np.diff(f) > 0)
        np.testing.assert_array_equal(f, log_mean_logistic([z]))

    def test_keeps_underflowing_scores_distinct(self):
        z = np.array([-2000.0, -1500.0, -900.0])
        assert np.all(normalize(z, NormalizerConfig("logistic")) == 0.0)
        assert np.all(np.diff(log_mean_logistic([z, z + 1])) > 0)

    def test_same_order_as_mean(self, rng):
        Z = rng.normal(scale=3, size=(4, 300))
        a = log_mean_logistic(Z)
        b = fuse_scores(list(normalize(Z, NormalizerConfig("logistic"))))
        np.testing.assert_array_equal(np.argsort(a, kind="stable"), np.argsort(b, kind="stable"))
        np.testing.assert_allclose(np.exp(a), b, rtol=1e-13)


class TestDecisionFusion:
    @pytest.mark.parametrize("votes,expect", [([A, A, R], A), ([A, R], R), ([R, R, R, A], R),
                                              ([A, A, R, R], R), ([A, A, A, R], A)])
    def test_majority(self, votes, expect):
        assert fuse_decisions(votes) is expect

    @pytest.mark.parametrize("d", [A, R])
    def test_unanimous(self, d):
        assert fuse_decisions([d] * 3) is d

    def test_vote_threshold_agrees_with_majority(self):
        for m in (2, 3, 4):
            for accepts in range(m + 1):
                votes = [A] * accepts + [R] * (m - accepts)
                assert (accepts / m >= vote_threshold(m)) == (fuse_decisions(votes) is A)

    def test_single_decision(self):
        with pytest.raises(ParameterError):
            fuse_decisions([A])


class TestEnumeration:
    def test_counts(self):
        subsets = enumerate_fusions()
        assert len(subsets) == 11
        assert sum(len(s) == 2 for s in subsets) == 6
        assert sum(len(s) == 3 for s in subsets) == 4

    def test_contains_if_lof_sv1c(self):
        assert any(set(s) == {OccKind.IF, OccKind.LOF, OccKind.SV1C} for s in enumerate_fusions())

    def test_name(self):
        assert fusion_name(("sv1c", "ee")) == "SV1C+EE"


class TestCorrelation:
    def test_self_and_negated(self, rng):
        x = rng.normal(size=50)
        c = score_correlation(np.column_stack([x, x, -x]))
        np.testing.assert_allclose(c.matrix[0, 1], 1.0)
        np.testing.assert_allclose(c.matrix[0, 2], -1.0)

    def test_independent_columns(self):
        r = np.random.default_rng(7).normal(size=(1000, 2))
        c = score_correlation(r).matrix[0, 1]
        assert c == pytest.approx(pearson(list(r[:, 0]), list(r[:, 1])), abs=1e-12)
        assert abs(c) < 0.1

    def test_psd_symmetric(self, rng):
        S = rng.normal(size=(40, 4)) @ rng.normal(size=(4, 4))
        M = score_correlation(S).matrix
        np.testing.assert_array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-8
        np.testing.assert_array_equal(np.diag(M), 1.0)

    def test_zero_variance_flagged(self, rng):
        S = np.column_stack([rng.normal(size=20), np.full(20, 3.0)])
        c = score_correlation(S)
        assert c.undefined[0, 1] and np.isnan(c.matrix[0, 1])

    def test_csv(self, rng, tmp_path):
        score_correlation(rng.normal(size=(10, 2)), ["A", "B"]).to_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",A,B" and lines[1].startswith("A,1.0,")


class TestStacker:
    def test_centroid_accepted(self, rng):
        V = 0.8 + 0.05 * rng.normal(size=(60, 4))
        m = fit_stacker(V)
        assert m.predict(V.mean(axis=0)) is Decision.ACCEPT

    def test_far_vector_rejected(self):
        m = fit_stacker(np.full((10, 4), 0.9))
        assert m.predict(np.zeros(4)) is Decision.REJECT

    def test_needs_eight(self):
        with pytest.raises(InsufficientDataError):
            fit_stacker(np.zeros((7, 4)))
