from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from vbdropout.specfun import (
    EULER_GAMMA,
    SeriesConfig,
    SeriesConvergenceError,
    dawson,
    digamma,
    exp_integral_e1,
    logunif_grad_series,
    logunif_series,
    softplus,
    std_normal_cdf,
)

# frozen from mpmath at 40 digits
DIGAMMA_7_3 = 1.9178203356379860984
DAWSON_1 = 0.53807950691276841914
DAWSON_2 = 0.30134038892379196603
E1_HALF = 0.55977359477616081175
S_AT_1 = -0.48462676582326487844


def _dawson_ode(xs):
    """Integrate D' = 1 - 2xD from D(0) = 0 at tight tolerance."""
    sol = solve_ivp(lambda x, d: 1.0 - 2.0 * x * d, (0.0, max(xs)), [0.0], method="DOP853",
                    rtol=1e-13, atol=1e-15, t_eval=sorted(xs), dense_output=False)
    return dict(zip(sorted(xs), sol.y[0]))


class TestDigamma:
    @pytest.mark.parametrize(
        "x, expected",
        [(1.0, -EULER_GAMMA), (0.5, -EULER_GAMMA - 2.0 * math.log(2.0)), (7.3, DIGAMMA_7_3)],
    )
    def test_known_values(self, x, expected):
        assert digamma(x) == pytest.approx(expected, rel=1e-13, abs=1e-15)

    def test_recurrence_on_log_grid(self):
        xs = np.logspace(-3, 2, 200)
        resid = digamma(xs + 1.0) - digamma(xs) - 1.0 / xs
        # 1/x itself is only known to an ulp, so the tolerance scales with it
        assert np.all(np.abs(resid) <= 1e-12 * np.maximum(1.0, 1.0 / xs))

    @pytest.mark.parametrize("x", [1e-3, 0.37, 2.5, 11.0, 123.4, 999.0])
    def test_against_mpmath(self, x):
        assert digamma(x) == pytest.approx(float(mp.digamma(x)), rel=1e-12)

    @pytest.mark.parametrize("x", [0.0, -1.0, -0.5])
    def test_domain(self, x):
        with pytest.raises(ValueError):
            digamma(x)

    def test_array_in_array_out(self):
        out = digamma(np.array([1.0, 2.0]))
        assert isinstance(out, np.ndarray) and out.shape == (2,)
        assert isinstance(digamma(1.0), float)


class TestDawson:
    def test_zero(self):
        assert dawson(0.0) == 0.0

    def test_ode_oracle(self):
        ref = _dawson_ode([0.5, 1.0, 2.0, 3.5, 7.0])
        for x, d in ref.items():
            assert abs(dawson(x) - d) < 1e-10
        assert abs(ref[1.0] - DAWSON_1) < 1e-11

    @given(st.floats(-50, 50))
    def test_odd(self, x):
        assert dawson(-x) == -dawson(x)

    @pytest.mark.parametrize("x", [1e-8, 0.05, 0.2, 0.9, 1.5, 4.0, 9.9, 25.0, 49.0, 500.0])
    def test_against_mpmath(self, x):
        ref = float(mp.sqrt(mp.pi) / 2 * mp.exp(-mp.mpf(x) ** 2) * mp.erfi(x))
        assert abs(dawson(x) - ref) < 1e-12 * max(1.0, abs(ref))

    def test_ode_residual(self):
        xs = np.linspace(-10, 10, 401)
        h = 1e-5
        deriv = (dawson(xs + h) - dawson(xs - h)) / (2 * h)
        np.testing.assert_allclose(deriv, 1.0 - 2.0 * xs * dawson(xs), atol=1e-8)


class TestNormalCdf:
    def test_values(self):
        assert std_normal_cdf(0.0) == 0.5
        assert std_normal_cdf(1.0) == pytest.approx(0.84134474606854294859, abs=1e-15)

    @given(st.floats(-40, 40))
    def test_symmetry(self, x):
        assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) <= 1e-14

    def test_nondecreasing(self):
        v = std_normal_cdf(np.linspace(-12, 12, 5001))
        assert np.all(np.diff(v) >= 0)


class TestE1:
    @staticmethod
    def _series(x, terms=80):
        s = mp.mpf(0)
        for k in range(1, terms):
            s += (-1) ** (k + 1) * mp.mpf(x) ** k / (k * mp.factorial(k))
        return float(-mp.euler - mp.log(x) + s)

    @pytest.mark.parametrize("x, expected", [(1.0, 0.21938393439552027368), (0.5, E1_HALF)])
    def test_series_oracle(self, x, expected):
        assert exp_integral_e1(x) == pytest.approx(expected, rel=1e-12)
        assert self._series(x) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("x", [0.01, 0.7, 1.3, 5.0, 20.0, 60.0, 100.0])
    def test_relative_accuracy(self, x):
        assert exp_integral_e1(x) == pytest.approx(float(mp.e1(x)), rel=1e-10)

    def test_decreasing_to_zero(self):
        v = exp_integral_e1(np.linspace(0.1, 100, 500))
        assert np.all(np.diff(v) < 0) and v[-1] < 1e-44

    def test_domain(self):
        with pytest.raises(ValueError):
            exp_integral_e1(0.0)


class TestSoftplus:
    def test_values(self):
        assert softplus(0.0) == pytest.approx(math.log(2.0), rel=1e-16)
        assert softplus(1000.0) == pytest.approx(1000.0, rel=1e-12)
        assert softplus(1e6) == 1e6
        assert softplus(-1e6) == 0.0

    @given(st.floats(-30, 30))
    def test_identity(self, x):
        lhs = softplus(x) + softplus(-x)
        assert lhs == pytest.approx(math.log(2.0 + math.exp(x) + math.exp(-x)), rel=1e-14)


def _mp_series(u, grad=False):
    terms = int(u + 60 * math.sqrt(u) + 100)
    u = mp.mpf(u)
    f = (lambda k: 1 / (mp.mpf(1) / 2 + k)) if grad else (lambda k: mp.digamma(mp.mpf(1) / 2 + k))
    return float(mp.exp(-u) * mp.fsum(u**k / mp.factorial(k) * f(k) for k in range(terms)))


class TestLogunifSeries:
    def test_zero(self):
        assert logunif_series(0.0) == digamma(0.5)
        assert logunif_grad_series(0.0) == 2.0

    def test_u_one(self):
        assert logunif_series(1.0) == pytest.approx(S_AT_1, abs=1e-14)

    @pytest.mark.parametrize("u", [0.3, 4.0, 29.0, 31.0, 200.0, 1000.0])
    def test_against_mpmath(self, u):
        assert logunif_series(u) == pytest.approx(_mp_series(u), abs=1e-12 * max(1.0, u))

    @staticmethod
    def _harmonic_bound(u, gamma_sign):
        # psi(1/2) + sum_k>=1 u^k/k! psi(1 + k) in closed form, using
        # sum_k>=1 u^k H_k / k! = e^u (gamma + log u + E1(u))
        return digamma(0.5) + gamma_sign * EULER_GAMMA + math.exp(u) * (math.log(u) + exp_integral_e1(u))

    @pytest.mark.parametrize("u", [0.5, 2.0, 10.0])
    def test_harmonic_comparison_bound(self, u):
        lhs = math.exp(u) * logunif_series(u)
        assert lhs < self._harmonic_bound(u, +1.0)

    def test_bound_with_negative_gamma_fails_at_half(self):
        # -gamma (e^u - 1) contributes +gamma, not -gamma; the -gamma form is
        # too tight for small u
        lhs = math.exp(0.5) * logunif_series(0.5)
        assert lhs > self._harmonic_bound(0.5, -1.0)
        assert all(math.exp(u) * logunif_series(u) < self._harmonic_bound(u, -1.0) for u in (2.0, 10.0))

    def test_grad_at_four(self):
        assert logunif_grad_series(4.0) == pytest.approx(DAWSON_2, abs=1e-12)

    @pytest.mark.parametrize("u", [0.1, 1.0, 25.0, 300.0])
    def test_grad_identity(self, u):
        r = math.sqrt(u)
        assert abs(logunif_grad_series(u) - 2.0 * dawson(r) / r) < 1e-9

    def test_finite_on_range(self):
        for u in np.linspace(0, 1000, 41):
            assert math.isfinite(logunif_series(u)) and math.isfinite(logunif_grad_series(u))

    def test_small_u_limit_monotone(self):
        vals = [dawson(math.sqrt(u)) / math.sqrt(u) for u in (1e-4, 1e-6, 1e-8)]
        assert vals[0] < vals[1] < vals[2] <= 1.0
        assert 1.0 - vals[2] < 1e-8

    def test_cap_raises(self):
        with pytest.raises(SeriesConvergenceError):
            logunif_series(50.0, SeriesConfig(rel_tol=1e-14, max_terms=5))

    @pytest.mark.parametrize("kwargs", [{"rel_tol": 0.0}, {"max_terms": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SeriesConfig(**kwargs)

    def test_negative_u(self):
        with pytest.raises(ValueError):
            logunif_series(-1.0)
