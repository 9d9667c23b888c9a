"""Special functions used across the package.

Everything here accepts a float or an ndarray and returns the same kind.
The Poisson-weighted series behind the log-uniform KL term live here too,
since they are the only consumers of the truncation settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, gammaln

EULER_GAMMA = 0.57721566490153286061
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)

# Bernoulli-number coefficients B_2k / (2k) of the digamma asymptotic series.
_DIGAMMA_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_DIGAMMA_SHIFT = 10.0

# Rybicki sampling step; aliasing error is ~exp(-(pi / (2h))^2), far below 1e-16.
_DAWSON_H = 0.1
_DAWSON_COEF = np.exp(-(((2.0 * np.arange(34) + 1.0) * _DAWSON_H) ** 2))
_DAWSON_ASYMPTOTIC_FROM = 1.0e4


class SeriesConvergenceError(ArithmeticError):
    """A truncated series hit its term cap before reaching the tolerance."""


@dataclass(frozen=True)
class SeriesConfig:
    """Truncation settings for the infinite Poisson-weighted series."""

    rel_tol: float = 1e-14
    max_terms: int = 100_000

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.max_terms < 1:
            raise ValueError(f"max_terms must be >= 1, got {self.max_terms}")


DEFAULT_SERIES = SeriesConfig()


def _unwrap(x, out):
    return float(out) if np.ndim(x) == 0 else out


def digamma(x):
    """Digamma function for positive arguments.

    Shifts the argument above 10 with psi(x) = psi(x + 1) - 1/x and finishes
    with the asymptotic Bernoulli series.
    """
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(x_arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    z = x_arr.copy()
    acc = np.zeros_like(z)
    while True:
        small = z < _DIGAMMA_SHIFT
        if not small.any():
            break
        acc = acc - np.where(small, 1.0 / z, 0.0)
        z = np.where(small, z + 1.0, z)
    inv2 = 1.0 / (z * z)
    tail = np.zeros_like(z)
    for c in reversed(_DIGAMMA_ASYMPTOTIC):
        tail = (tail + c) * inv2
    out = acc + np.log(z) - 0.5 / z - tail
    return _unwrap(x, out)


def _dawson_taylor(x):
    # Alternating series sum_k (-2x^2)^k x / (2k+1)!!, only used for |x| < 0.2.
    x2 = x * x
    term = x.copy()
    total = x.copy()
    for k in range(1, 14):
        term = term * (-2.0 * x2) / (2.0 * k + 1.0)
        total = total + term
    return total


def _dawson_rybicki(xx):
    n0 = 2.0 * np.round(0.5 * xx / _DAWSON_H)
    xp = xx - n0 * _DAWSON_H
    e1 = np.exp(2.0 * xp * _DAWSON_H)
    e2 = e1 * e1
    d1 = n0 + 1.0
    d2 = d1 - 2.0
    total = np.zeros_like(xx)
    for c in _DAWSON_COEF:
        total = total + c * (e1 / d1 + 1.0 / (d2 * e1))
        d1 = d1 + 2.0
        d2 = d2 - 2.0
        e1 = e1 * e2
    return _INV_SQRT_PI * np.exp(-xp * xp) * total


def _dawson_asymptotic(xx):
    inv2 = 1.0 / (2.0 * xx * xx)
    return (1.0 + inv2 * (1.0 + 3.0 * inv2 * (1.0 + 5.0 * inv2))) / (2.0 * xx)


def dawson(x):
    """Dawson integral D+(x) = exp(-x^2) * int_0^x exp(t^2) dt."""
    x_arr = np.asarray(x, dtype=float)
    ax = np.abs(x_arr)
    out = np.empty_like(ax)
    small = ax < 0.2
    large = ax >= _DAWSON_ASYMPTOTIC_FROM
    mid = ~(small | large)
    out[small] = _dawson_taylor(ax[small])
    out[mid] = _dawson_rybicki(ax[mid])
    out[large] = _dawson_asymptotic(ax[large])
    out = np.copysign(out, x_arr)
    return _unwrap(x, out)


def std_normal_cdf(x):
    x_arr = np.asarray(x, dtype=float)
    return _unwrap(x, 0.5 * erfc(-x_arr / math.sqrt(2.0)))


def std_normal_sf(x):
    """Upper tail 1 - Phi(x), accurate far into the right tail."""
    x_arr = np.asarray(x, dtype=float)
    return _unwrap(x, 0.5 * erfc(x_arr / math.sqrt(2.0)))


def _e1_scalar(x: float) -> float:
    if x <= 1.0:
        # -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k k!)
        total = 0.0
        term = 1.0
        for k in range(1, 60):
            term *= -x / k
            contrib = -term / k
            total += contrib
            if abs(contrib) < 1e-17 * abs(total):
                break
        return -EULER_GAMMA - math.log(x) + total
    # Modified Lentz evaluation of the continued fraction for E1.
    tiny = 1e-300
    b = x + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x)


def exp_integral_e1(x):
    """Exponential integral E1(x) = int_x^inf exp(-t)/t dt for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(x_arr > 0)):
        raise ValueError("E1 is only defined here for x > 0")
    out = np.vectorize(_e1_scalar, otypes=[float])(x_arr)
    return _unwrap(x, out)


def softplus(x):
    """log(1 + e^x) without overflow; equals x + log1p(e^-x) for large x."""
    x_arr = np.asarray(x, dtype=float)
    out = np.maximum(x_arr, 0.0) + np.log1p(np.exp(-np.abs(x_arr)))
    return _unwrap(x, out)


def _poisson_expectation(u: float, values, cfg: SeriesConfig, chunk: int = 512) -> float:
    """e^-u sum_k u^k/k! values(k), with the weights formed in log space.

    Summation starts where the Poisson lower tail is below 1e-300 and stops
    at the first index past the mode whose term and weight are both within
    rel_tol of their running sums. The result is divided by the computed
    weight total (exactly 1 in exact arithmetic), which cancels the rounding
    shared by all log-weights when u is large.
    """
    if not u >= 0 or not math.isfinite(u):
        raise ValueError(f"series argument must be finite and >= 0, got {u}")
    if u == 0.0:
        # 0^0 := 1 leaves only the k = 0 term.
        return float(values(np.zeros(1))[0])
    log_u = math.log(u)
    k0 = max(0, int(u - 40.0 * math.sqrt(u) - 40.0))
    kept_w, kept_t = [], []
    total = 0.0
    weight = 0.0
    used = 0
    while used < cfg.max_terms:
        n = min(chunk, cfg.max_terms - used)
        k = np.arange(k0, k0 + n, dtype=float)
        w = np.exp(-u + k * log_u - gammaln(k + 1.0))
        terms = w * values(k)
        partial = total + np.cumsum(terms)
        partial_w = weight + np.cumsum(w)
        done = (k > u) & (np.abs(terms) <= cfg.rel_tol * np.abs(partial)) & (w <= cfg.rel_tol * partial_w)
        if done.any():
            stop = np.argmax(done) + 1
            kept_w.append(w[:stop])
            kept_t.append(terms[:stop])
            return math.fsum(np.concatenate(kept_t)) / math.fsum(np.concatenate(kept_w))
        kept_w.append(w)
        kept_t.append(terms)
        total = float(partial[-1])
        weight = float(partial_w[-1])
        k0 += n
        used += n
    raise SeriesConvergenceError(
        f"series at u={u} did not reach rel_tol={cfg.rel_tol} within {cfg.max_terms} terms"
    )


def logunif_series(u: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """S(u) = e^-u sum_k u^k/k! psi(1/2 + k)."""
    return _poisson_expectation(float(u), lambda k: digamma(0.5 + k), cfg)


def logunif_grad_series(u: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """G(u) = e^-u sum_k u^k / (k! (1/2 + k)); equals 2 D+(sqrt u)/sqrt u."""
    return _poisson_expectation(float(u), lambda k: 1.0 / (0.5 + k), cfg)
