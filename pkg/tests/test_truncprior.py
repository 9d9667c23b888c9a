from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vbdropout.quadrature import adaptive_simpson
from vbdropout.truncprior import (
    ConstMean,
    SymmetricGrowth,
    TruncInterval,
    ZeroMean,
    improper_mass_scan,
    posterior_mean,
    posterior_moments,
    posterior_moments_quadrature,
    posterior_normalizer,
    posterior_second_moment,
    sequence_diagnostics,
    sequence_point,
    sigmoid,
    tail_mass_scan,
)

# mpmath, 30 digits
MEAN_0_1 = 1.219562657964638239
SECOND_0_1 = 3.1945280494653251136


class TestInterval:
    @pytest.mark.parametrize("a, b", [(1.0, 1.0), (2.0, 1.0), (math.nan, 1.0), (-math.inf, 0.0)])
    def test_rejects(self, a, b):
        with pytest.raises(ValueError):
            TruncInterval(a, b)


class TestClosedForms:
    @pytest.mark.parametrize("a, b, z", [(0.0, 1.0, 1.0), (-3.0, 5.0, 8.0)])
    def test_normalizer(self, a, b, z):
        assert posterior_normalizer(TruncInterval(a, b)) == z

    def test_normalizer_by_quadrature_in_w(self):
        # direct integral of sigmoid(w)/|w| over both support pieces, no substitution
        a, b = -1.0, 1.5
        f = lambda w: sigmoid(w) / np.abs(w)
        z = adaptive_simpson(f, -math.exp(b), -math.exp(a), 1e-12).value + adaptive_simpson(f, math.exp(a), math.exp(b), 1e-12).value
        assert z == pytest.approx(b - a, abs=1e-8)

    def test_mean_unit_interval(self):
        assert posterior_mean(TruncInterval(0.0, 1.0)) == pytest.approx(MEAN_0_1, rel=1e-14)

    def test_second_moment_unit_interval(self):
        m2 = posterior_second_moment(TruncInterval(0.0, 1.0))
        assert m2 == pytest.approx((math.e**2 - 1) / 2, rel=1e-15)
        assert m2 == pytest.approx(SECOND_0_1, rel=1e-15)

    @pytest.mark.parametrize("a", [-1e3, -1e6])
    def test_mean_vanishes_as_a_falls(self, a):
        b = 1.0
        m = posterior_mean(TruncInterval(a, b))
        # h(e) + h(-e) = e + 2 log1p(e^-e); the lower pair tends to 2 log 2
        expect = (math.e + 2 * math.log1p(math.exp(-math.e)) - 2 * math.log(2)) / (b - a)
        assert m == pytest.approx(expect, rel=1e-9)
        assert 0 < m < 5.0 / abs(a)

    @pytest.mark.parametrize("b", [10.0, 30.0, 100.0, 700.0])
    def test_symmetric_growth_constant(self, b):
        m = posterior_mean(TruncInterval(-b, b))
        assert m * 2 * b / math.exp(b) == pytest.approx(1.0, abs=1e-3)

    def test_overflow_flags(self):
        assert posterior_second_moment(TruncInterval(0.0, 400.0)) == math.inf
        assert posterior_mean(TruncInterval(0.0, 800.0)) == math.inf
        mom = posterior_moments(TruncInterval(-10.0, 400.0))
        assert math.isfinite(mom.mean) and mom.variance == math.inf
        assert math.isnan(posterior_moments(TruncInterval(0.0, 800.0)).variance)

    def test_mean_beyond_exp_range(self):
        # e^b overflows but e^b / (b - a) does not
        b = 710.0
        a = b - 1e10
        m = posterior_mean(TruncInterval(a, b))
        assert m == pytest.approx(math.exp(b - math.log(1e10)), rel=1e-12)

    @pytest.mark.parametrize("a", [-2.0, 0.0, 3.0])
    def test_narrow_interval_second_moment(self, a):
        for eps in (1e-4, 1e-8, 1e-12):
            assert posterior_second_moment(TruncInterval(a, a + eps)) == pytest.approx(math.exp(2 * a), rel=2 * eps + 1e-15)

    def test_variance_identity(self):
        m = posterior_moments(TruncInterval(-2.0, 1.5))
        assert m.variance == m.second_moment - m.mean**2
        assert m.second_moment >= 0

    @given(st.floats(-50, 50), st.floats(1e-3, 20), st.floats(-30, 30))
    def test_normalizer_translation(self, a, w, shift):
        assert posterior_normalizer(TruncInterval(a, a + w)) == pytest.approx(posterior_normalizer(TruncInterval(a + shift, a + w + shift)), abs=1e-12)

    @given(st.floats(-5, 0), st.floats(0.5, 5))
    def test_against_quadrature(self, a, b):
        iv = TruncInterval(a, b)
        closed, quad = posterior_moments(iv), posterior_moments_quadrature(iv)
        assert closed.normalizer == pytest.approx(quad.normalizer, rel=1e-6)
        assert closed.mean == pytest.approx(quad.mean, rel=1e-6)
        assert closed.second_moment == pytest.approx(quad.second_moment, rel=1e-6)

    def test_quadrature_other_label(self):
        # y = 0 flips the likelihood, so the mean flips sign
        iv = TruncInterval(0.0, 1.0)
        assert posterior_moments_quadrature(iv, y=0).mean == pytest.approx(-MEAN_0_1, rel=1e-10)
        with pytest.raises(ValueError):
            posterior_moments_quadrature(iv, y=2)

    @given(st.floats(-5, 0), st.floats(0.5, 5))
    def test_finite_sensitivities(self, a, b):
        h = 1e-6
        for f in (posterior_mean, posterior_second_moment):
            da = (f(TruncInterval(a + h, b)) - f(TruncInterval(a - h, b))) / (2 * h)
            db = (f(TruncInterval(a, b + h)) - f(TruncInterval(a, b - h))) / (2 * h)
            assert math.isfinite(da) and math.isfinite(db)


class TestSequences:
    def test_points(self):
        iv = sequence_point(ZeroMean(), 100)
        assert iv.a == -100.0 and iv.b == pytest.approx(1.5271796258079011, abs=1e-12)
        iv = sequence_point(ConstMean(2.0), 5)
        assert iv.b == 5.0 and iv.a == pytest.approx(5 - math.exp(5) / 2, abs=1e-12)
        assert iv.a == pytest.approx(-69.2066, abs=1e-4)
        iv = sequence_point(SymmetricGrowth(), 3)
        assert (iv.a, iv.b) == (-3.0, 3.0)

    @pytest.mark.parametrize("kind, n", [(ZeroMean(), 1), (ConstMean(1.0), 0), (SymmetricGrowth(), 0), (ConstMean(1.0), 800)])
    def test_invalid_index(self, kind, n):
        with pytest.raises(ValueError):
            sequence_point(kind, n)

    def test_const_mean_requires_positive_c(self):
        with pytest.raises(ValueError):
            ConstMean(0.0)

    def test_zero_mean(self):
        rep = sequence_diagnostics(ZeroMean(), [100, 10_000, 1_000_000])
        means = [abs(r.mean) for r in rep.rows]
        assert means[0] > means[1] > means[2]
        assert means[-1] < 0.05
        variances = [r.variance for r in rep.rows]
        assert variances[0] > variances[1] > variances[2] and variances[-1] < 1e-4
        assert rep.last.second_moment < 1e-4

    def test_const_mean(self):
        rep = sequence_diagnostics(ConstMean(2.0), [5, 10, 20, 40])
        assert abs(rep.last.mean - 2.0) < 1e-3
        assert all(r > 10 for r in rep.second_moment_ratios)

    def test_const_mean_second_moment_growth(self):
        # E w^2 = c e^n / 2 exactly once e^{2a} underflows
        rep = sequence_diagnostics(ConstMean(2.0), [40, 400])
        assert rep.last.second_moment == pytest.approx(math.exp(400.0), rel=1e-12)
        assert abs(rep.last.mean - 2.0) < 1e-12

    def test_symmetric_growth(self):
        rep = sequence_diagnostics(SymmetricGrowth(), [5, 10, 20])
        scaled = [r.scaled_mean for r in rep.rows]
        assert all(0.9 <= s <= 1.1 for s in scaled)
        assert scaled[0] < scaled[1] < scaled[2] <= 1.0

    def test_symmetric_growth_infinite_mean(self):
        rep = sequence_diagnostics(SymmetricGrowth(), [800])
        assert rep.last.mean == math.inf and math.isnan(rep.last.variance)

    @pytest.mark.parametrize("ns", [[], [10, 5], [5, 5]])
    def test_bad_schedule(self, ns):
        with pytest.raises(ValueError):
            sequence_diagnostics(SymmetricGrowth(), ns)


DELTAS = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]


class TestImproperScan:
    def test_sigmoid(self):
        res = improper_mass_scan(sigmoid, 1.0, DELTAS)
        slopes = [r.slope for r in res.rows]
        assert math.isnan(slopes[0])
        for s in slopes[1:]:
            assert s == pytest.approx(0.5, rel=0.05)
        assert res.bound_holds
        assert res.min_likelihood == pytest.approx(sigmoid(-1.0), rel=1e-12)

    def test_constant_likelihood_exact(self):
        res = improper_mass_scan(lambda w: np.ones_like(w), 1.0, DELTAS)
        for r in res.rows:
            assert r.mass == pytest.approx(2 * math.log(1.0 / r.x), rel=1e-12)
            assert math.isnan(r.slope) or r.slope == pytest.approx(1.0, rel=1e-12)

    def test_gaussian_likelihood(self):
        # one regression point (x, y) = (1, 0.3) with noise variance 0.5
        def lik(w):
            return np.exp(-((0.3 - w) ** 2) / (2 * 0.5)) / math.sqrt(2 * math.pi * 0.5)

        res = improper_mass_scan(lik, 1.0, DELTAS)
        l0 = float(lik(np.zeros(1))[0])
        assert res.rows[-1].slope == pytest.approx(l0, rel=0.05)
        assert res.bound_holds

    @pytest.mark.parametrize("lik", [lambda w: np.zeros_like(w), lambda w: -np.ones_like(w)])
    def test_rejects_vanishing_origin(self, lik):
        with pytest.raises(ValueError):
            improper_mass_scan(lik, 1.0, DELTAS)

    @pytest.mark.parametrize("deltas", [[], [2.0], [1e-2, 1e-2], [1e-3, 1e-2]])
    def test_bad_radii(self, deltas):
        with pytest.raises(ValueError):
            improper_mass_scan(sigmoid, 1.0, deltas)


class TestTailScan:
    def test_slopes(self):
        res = tail_mass_scan(1.0, [10.0, 100.0, 1000.0])
        slopes = [r.slope for r in res.rows][1:]
        assert all(0.95 <= s <= 1.0 + 1e-9 for s in slopes)
        assert slopes[0] < slopes[1]
        assert res.bound_holds
        for r in res.rows:
            assert r.mass >= r.bound

    def test_large_k(self):
        res = tail_mass_scan(20.0, [100.0, 1000.0])
        for r in res.rows:
            assert r.mass == pytest.approx(math.log(r.x / 20.0), rel=1e-6)

    @pytest.mark.parametrize("k, uppers", [(0.0, [10.0]), (5.0, [4.0]), (1.0, []), (1.0, [10.0, 5.0])])
    def test_rejects(self, k, uppers):
        with pytest.raises(ValueError):
            tail_mass_scan(k, uppers)
