"""Posterior pathologies of log-uniform priors on a one-weight logistic model.

With likelihood sigmoid(w) for the observation (x=1, y=1) and the prior
uniform in log|w| on [a, b] (on both signs of w), the posterior moments are
closed-form:

    Z      = b - a
    E w    = [h(e^b) + h(-e^b) - h(e^a) - h(-e^a)] / (b - a),  h = softplus
    E w^2  = (e^{2b} - e^{2a}) / (2 (b - a))

and their limits depend on how [a, b] grows. The untruncated prior 1/|w|
makes the posterior improper, both near the origin and in the tails; the
two scans here measure that divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .quadrature import adaptive_simpson
from .specfun import softplus

# Largest t with e^t finite in double precision.
_LOG_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class TruncInterval:
    """Truncation bounds a < b for log|w|."""

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"bounds must be finite, got ({self.a}, {self.b})")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got ({self.a}, {self.b})")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class PosteriorMoments:
    normalizer: float
    mean: float
    second_moment: float
    variance: float


@dataclass(frozen=True)
class ZeroMean:
    """a_n = -n, b_n = log log n: mean and variance both tend to 0."""


@dataclass(frozen=True)
class ConstMean:
    """b_n = n, a_n = n - e^n / c: mean tends to c, second moment diverges."""

    c: float

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"c must be positive, got {self.c}")


@dataclass(frozen=True)
class SymmetricGrowth:
    """a_n = -n, b_n = n: mean grows like e^n / (2n)."""


SequenceKind = Union[ZeroMean, ConstMean, SymmetricGrowth]


def posterior_normalizer(iv: TruncInterval) -> float:
    # sigmoid(w) + sigmoid(-w) = 1 cancels the likelihood, leaving the log-length
    return iv.b - iv.a


def _pair_softplus(t: float) -> float:
    """h(e^t) + h(-e^t); equal to e^t to double precision once t > 4."""
    if t > _LOG_MAX:
        return math.inf
    x = math.exp(t)
    return softplus(x) + softplus(-x)


def posterior_mean(iv: TruncInterval) -> float:
    """Closed-form posterior mean; +inf when e^b / (b - a) overflows."""
    width = iv.b - iv.a
    upper = _pair_softplus(iv.b)
    lower = _pair_softplus(iv.a)
    if math.isinf(upper):
        # h(e^b) + h(-e^b) = e^b here; divide in log space first
        log_ratio = iv.b - math.log(width)
        return math.inf if log_ratio > _LOG_MAX else math.exp(log_ratio) - lower / width
    return (upper - lower) / width


def posterior_second_moment(iv: TruncInterval) -> float:
    """(e^{2b} - e^{2a}) / (2 (b - a)), or +inf when it exceeds the float range.

    Evaluated in log space as e^{2a} expm1(2w) / (2w) with w = b - a for
    narrow intervals and as e^{2b} (1 - e^{-2w}) / (2w) for wide ones, so it
    stays accurate as w -> 0 and when a is hugely negative.
    """
    x = 2.0 * (iv.b - iv.a)
    if x > 1.0:
        log_m2 = 2.0 * iv.b + math.log1p(-math.exp(-x)) - math.log(x)
    else:
        log_m2 = 2.0 * iv.a + math.log(math.expm1(x) / x)
    return math.inf if log_m2 > _LOG_MAX else math.exp(log_m2)


def posterior_moments(iv: TruncInterval) -> PosteriorMoments:
    """All moments; variance is inf if E w^2 is, nan if the mean is infinite."""
    mean = posterior_mean(iv)
    m2 = posterior_second_moment(iv)
    if math.isinf(mean):
        var = math.nan
    elif math.isinf(m2):
        var = math.inf
    else:
        var = m2 - mean * mean
    return PosteriorMoments(posterior_normalizer(iv), mean, m2, var)


def posterior_moments_quadrature(iv: TruncInterval, x: float = 1.0, y: int = 1, tol: float = 1e-12) -> PosteriorMoments:
    """Moments by adaptive quadrature over both support pieces.

    Integrates in t = log|w| over [a, b], which turns the prior 1/|w| into
    a flat weight and covers [-e^b, -e^a] and [e^a, e^b] together. The
    likelihood is sigmoid(x w) for y = 1 and sigmoid(-x w) for y = 0.
    ``tol`` is relative to the magnitude of each integral.
    """
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y}")
    sign = 1.0 if y == 1 else -1.0

    def lik(w):
        return 0.5 * (1.0 + np.tanh(0.5 * sign * x * w))

    def piece(power):
        def f(t):
            w = np.exp(t)
            return w**power * (lik(w) + (-1.0) ** power * lik(-w))

        # tol is relative to the size of the integral
        scale = float(np.max(np.abs(f(np.linspace(iv.a, iv.b, 65))))) * (iv.b - iv.a)
        return adaptive_simpson(f, iv.a, iv.b, tol * max(scale, 1e-300)).value

    z = piece(0)
    mean = piece(1) / z
    m2 = piece(2) / z
    return PosteriorMoments(z, mean, m2, m2 - mean * mean)


def sequence_point(kind: SequenceKind, n: int) -> TruncInterval:
    """The n-th interval of a truncation sequence.

    Raises:
        ValueError: if n is below the first valid index (2 for ZeroMean,
            1 otherwise) or e^n overflows for ConstMean.
    """
    if isinstance(kind, ZeroMean):
        if n < 2:
            raise ValueError("ZeroMean needs n >= 2 so that log log n is defined")
        return TruncInterval(-float(n), math.log(math.log(n)))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if isinstance(kind, ConstMean):
        if n > _LOG_MAX:
            raise ValueError(f"e^n overflows at n={n}")
        return TruncInterval(n - math.exp(n) / kind.c, float(n))
    if isinstance(kind, SymmetricGrowth):
        return TruncInterval(-float(n), float(n))
    raise TypeError(f"unknown sequence kind {kind!r}")


@dataclass(frozen=True)
class SequenceRow:
    n: int
    a: float
    b: float
    normalizer: float
    mean: float
    second_moment: float
    variance: float
    scaled_mean: float  # mean * 2b / e^b, the growth-normalised mean


@dataclass(frozen=True)
class SequenceReport:
    kind: SequenceKind
    rows: list
    second_moment_ratios: list  # E w^2 at step i+1 over step i

    @property
    def last(self) -> SequenceRow:
        return self.rows[-1]


def _scaled_mean(mean: float, b: float) -> float:
    if b <= 0 or math.isinf(mean):
        return math.nan
    return mean * 2.0 * b * math.exp(-b)


def sequence_diagnostics(kind: SequenceKind, ns: Sequence[int]) -> SequenceReport:
    ns = [int(n) for n in ns]
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("schedule must be a non-empty increasing list")
    rows = []
    for n in ns:
        iv = sequence_point(kind, n)
        m = posterior_moments(iv)
        rows.append(SequenceRow(n, iv.a, iv.b, m.normalizer, m.mean, m.second_moment, m.variance, _scaled_mean(m.mean, iv.b)))
    ratios = []
    for prev, cur in zip(rows, rows[1:]):
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios.append(float(np.divide(cur.second_moment, prev.second_moment)))
    return SequenceReport(kind, rows, ratios)


@dataclass(frozen=True)
class ScanRow:
    x: float  # delta for the origin scan, K for the tail scan
    mass: float
    slope: float
    bound: float


@dataclass(frozen=True)
class ScanResult:
    rows: list
    min_likelihood: float
    bound_holds: bool


def _secant_slopes(logs: Sequence[float], masses: Sequence[float], per: float) -> list:
    # the first point has no predecessor in the scan and gets nan
    out = [math.nan]
    for i in range(1, len(masses)):
        out.append((masses[i] - masses[i - 1]) / (per * (logs[i] - logs[i - 1])))
    return out


def improper_mass_scan(
    likelihood_at: Callable[[np.ndarray], np.ndarray],
    delta0: float,
    deltas: Sequence[float],
    eps: float = 0.05,
    tol: float = 1e-12,
) -> ScanResult:
    """Mass of L(w)/|w| on delta < |w| < delta0 as the inner radius shrinks.

    In t = log|w| the mass is the integral of L(e^t) + L(-e^t) over
    [log delta, log delta0], which grows like 2 L(0) log(delta0/delta). The
    reported slope is the secant of mass against log(1/delta) divided by 2,
    i.e. per side of the origin, so it tends to L(0). Each row's ``bound``
    is min(L) on the scanned annulus times (1 - eps); ``bound_holds`` says
    every defined slope is at least its bound.

    Args:
        likelihood_at: vectorised L(w), continuous with L(0) > 0.
        delta0: outer radius.
        deltas: strictly decreasing inner radii below delta0.
        eps: relative slack for the slope bound.
        tol: per-segment quadrature tolerance.

    Raises:
        ValueError: if L(0) <= 0 or the radii are malformed.
    """
    l0 = float(np.asarray(likelihood_at(np.zeros(1)))[0])
    if not l0 > 0:
        raise ValueError(f"likelihood at the origin must be positive, got {l0}")
    ds = [float(d) for d in deltas]
    if not ds or not (0 < ds[0] < delta0) or any(b >= a or b <= 0 for a, b in zip(ds, ds[1:])):
        raise ValueError("deltas must decrease strictly within (0, delta0)")

    def per_log(t):
        w = np.exp(t)
        return likelihood_at(w) + likelihood_at(-w)

    edges = [math.log(delta0)] + [math.log(d) for d in ds]
    masses = []
    total = 0.0
    for hi, lo in zip(edges[:-1], edges[1:]):
        total += adaptive_simpson(per_log, lo, hi, tol).value
        masses.append(total)
    logs = [-e for e in edges[1:]]
    slopes = _secant_slopes(logs, masses, 2.0)
    grid = np.exp(np.linspace(edges[-1], edges[0], 4001))
    r = float(min(np.min(likelihood_at(grid)), np.min(likelihood_at(-grid)), l0))
    bound = r * (1.0 - eps)
    rows = [ScanRow(d, m, s, bound) for d, m, s in zip(ds, masses, slopes)]
    holds = all(s >= bound for s in slopes if not math.isnan(s))
    return ScanResult(rows, r, holds)


def sigmoid(w):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(w, dtype=float)))


def tail_mass_scan(k: float, uppers: Sequence[float], tol: float = 1e-12) -> ScanResult:
    """Mass of sigmoid(w)/w on [k, K) for growing K.

    Each row carries the lower bound log(K/k) / (1 + e^-k) and the secant
    slope of mass against log K, which tends to 1.

    Raises:
        ValueError: unless 0 < k < K for every increasing K.
    """
    ks = [float(x) for x in uppers]
    if not k > 0 or not ks or ks[0] <= k or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("need 0 < k < K_1 < K_2 < ...")

    def per_log(t):
        return sigmoid(np.exp(t))

    edges = [math.log(k)] + [math.log(x) for x in ks]
    masses = []
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += adaptive_simpson(per_log, lo, hi, tol).value
        masses.append(total)
    slopes = _secant_slopes(edges[1:], masses, 1.0)
    bounds = [math.log(x / k) / (1.0 + math.exp(-k)) for x in ks]
    rows = [ScanRow(x, m, s, lb) for x, m, s, lb in zip(ks, masses, slopes, bounds)]
    return ScanResult(rows, float(sigmoid(k)), all(m >= lb for m, lb in zip(masses, bounds)))
