"""KL divergence between a Gaussian weight posterior and the log-uniform prior.

The prior is p(w) = C / |w|. Its KL from q = N(mu, sigma2) depends on the
parameters only through u = mu^2 / (2 sigma2):

    KL = -1/2 log(2 pi e) - log C + 1/2 (log 2 + S(u)),
    S(u) = e^-u sum_k u^k / k! psi(1/2 + k),

and dKL/du = D+(sqrt u) / sqrt u, which tends to 1 as u -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .quadrature import QuadratureError, gauss_hermite_normal, tanh_sinh
from .specfun import DEFAULT_SERIES, SeriesConfig, dawson, digamma, logunif_series

LOG_2PI_E = math.log(2.0 * math.pi) + 1.0

# Above this u the value comes from integrating the Dawson gradient instead
# of the Poisson series, whose length grows like sqrt(u).
SERIES_MAX_U = 30.0
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)

# Below this u the Dawson ratio is replaced by its Taylor series, which
# avoids the 0/0 at the origin and the cancellation just above it.
_SMALL_U = 1e-4


@dataclass(frozen=True)
class GaussianVariationalParam:
    """Mean and variance of a factorised Gaussian weight posterior."""

    mu: float
    sigma2: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")

    @property
    def u(self) -> float:
        return self.mu * self.mu / (2.0 * self.sigma2)


@dataclass(frozen=True)
class ThetaAlphaParam:
    """Multiplicative-noise form: w = theta * (1 + sqrt(alpha) * eps)."""

    theta: float
    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")

    @property
    def u(self) -> float:
        # mu^2 / sigma2 = 1 / alpha for every theta; theta = 0 takes the same
        # value by continuity.
        return 1.0 / (2.0 * self.alpha)

    def to_gaussian(self) -> GaussianVariationalParam:
        if self.theta == 0:
            raise ValueError("theta = 0 has zero variance and no Gaussian counterpart")
        return GaussianVariationalParam(self.theta, self.alpha * self.theta * self.theta)


@dataclass(frozen=True)
class RelativeOnly:
    """KL reported up to the prior's additive constant."""


@dataclass(frozen=True)
class AbsoluteWithC:
    """KL including -1/2 log(2 pi e) - log C for the prior C / |w|."""

    c: float

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"C must be positive and finite, got {self.c}")


ConstantMode = Union[RelativeOnly, AbsoluteWithC]


@dataclass(frozen=True)
class KlValue:
    value_up_to_const: float
    constant_mode: ConstantMode
    grad_mu: float
    grad_sigma2: float

    @property
    def value(self) -> float:
        """The KL with the additive constant selected by ``constant_mode``."""
        if isinstance(self.constant_mode, AbsoluteWithC):
            return self.value_up_to_const + absolute_constant(self.constant_mode.c)
        return self.value_up_to_const


def absolute_constant(c: float) -> float:
    return -0.5 * LOG_2PI_E - math.log(c)


def dawson_integral_series(u: float) -> float:
    """S(u) as psi(1/2) + 4 int_0^sqrt(u) D+(r) dr.

    Follows from S'(u) = 2 D+(sqrt u) / sqrt u. The integral uses 24-point
    Gauss-Legendre on unit-width panels; D+ is entire and varies on a unit
    scale, so each panel is exact to rounding.
    """
    if not (u >= 0 and math.isfinite(u)):
        raise ValueError(f"u must be finite and >= 0, got {u}")
    r = math.sqrt(u)
    panels = max(1, math.ceil(r))
    edges = np.linspace(0.0, r, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    integral = math.fsum((half[:, None] * _GL_WEIGHTS[None, :] * dawson(x)).ravel())
    return digamma(0.5) + 4.0 * integral


def kl_up_to_const(u: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """1/2 (log 2 + S(u)); strictly increasing on u >= 0.

    The Poisson series gives S for u <= SERIES_MAX_U and the integrated
    Dawson gradient beyond; the two agree to rounding where they overlap.
    """
    if u > SERIES_MAX_U:
        return 0.5 * (math.log(2.0) + dawson_integral_series(u))
    return 0.5 * (math.log(2.0) + logunif_series(u, cfg))


def kl_absolute(p: GaussianVariationalParam, c: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """Full KL(q || C/|w|) for an explicit normalising constant C.

    Args:
        p: posterior mean and variance.
        c: the constant C of the improper prior C / |w|.
        cfg: series truncation settings.

    Returns:
        E_q[log q] - E_q[log p]. Depends on (mu, sigma2) only through u.
    """
    return kl_up_to_const(p.u, cfg) + absolute_constant(AbsoluteWithC(c).c)


def kl_grad_u(u: float) -> float:
    """dKL/du = D+(sqrt u) / sqrt u, equal to 1 at u = 0."""
    if not (u >= 0 and math.isfinite(u)):
        raise ValueError(f"u must be finite and >= 0, got {u}")
    if u < _SMALL_U:
        # D+(x)/x = 1 - 2x^2/3 + 4x^4/15 - 8x^6/105 with x^2 = u
        return 1.0 - u * (2.0 / 3.0 - u * (4.0 / 15.0 - u * 8.0 / 105.0))
    r = math.sqrt(u)
    return dawson(r) / r


def kl_hess_u(u: float) -> float:
    """d2KL/du2, equal to -2/3 at u = 0.

    From dKL/du = sum_k (-2u)^k / (2k+1)!! for small u, and from
    ((1 - 2 r D+) r - D+) / (2 r^3) with r = sqrt(u) elsewhere.
    """
    if not (u >= 0 and math.isfinite(u)):
        raise ValueError(f"u must be finite and >= 0, got {u}")
    if u < 0.5:
        total, coef = 0.0, 1.0
        for k in range(1, 40):
            coef *= -2.0 / (2 * k + 1)
            term = k * coef * u ** (k - 1)
            total += term
            if abs(term) < 1e-17 * abs(total):
                break
        return total
    r = math.sqrt(u)
    d = dawson(r)
    return ((1.0 - 2.0 * r * d) * r - d) / (2.0 * r**3)


def kl_grad_params(p: GaussianVariationalParam) -> tuple[float, float]:
    """Chain rule through u: returns (dKL/dmu, dKL/dsigma2)."""
    g = kl_grad_u(p.u)
    return g * p.mu / p.sigma2, -g * p.mu * p.mu / (2.0 * p.sigma2 * p.sigma2)


def kl_value(
    p: GaussianVariationalParam,
    mode: ConstantMode = RelativeOnly(),
    cfg: SeriesConfig = DEFAULT_SERIES,
) -> KlValue:
    grad_mu, grad_sigma2 = kl_grad_params(p)
    return KlValue(kl_up_to_const(p.u, cfg), mode, grad_mu, grad_sigma2)


def _expected_log_abs_shifted_normal(m: float, half_width: float = 40.0) -> tuple[float, float]:
    """E log|Z + m| for Z ~ N(0, 1), by tanh-sinh on panels split at 0 and m."""

    def integrand(y):
        return np.log(np.abs(y)) * np.exp(-0.5 * (y - m) ** 2) / math.sqrt(2.0 * math.pi)

    lo, hi = m - half_width, m + half_width
    cuts = sorted({lo, hi, m} | ({0.0} if lo < 0.0 < hi else set()))
    total = 0.0
    error = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        res = tanh_sinh(integrand, a, b)
        total += res.value
        error += res.error
    return total, error


def kl_quadrature_oracle(
    p: GaussianVariationalParam, c: float, nodes: int = 64, max_error: float = 1e-7
) -> float:
    """Independent quadrature evaluation of KL(q || C/|w|).

    E_q[log q] uses Gauss-Hermite (exact here, the integrand is quadratic in
    the node). E_q[log |w|] = log sigma + E log|Z + mu/sigma| uses
    double-exponential quadrature, whose node clustering absorbs the
    logarithmic singularity at w = 0.

    Raises:
        ValueError: if ``nodes`` < 64.
        QuadratureError: if the estimated error exceeds ``max_error``.
    """
    if nodes < 64:
        raise ValueError(f"nodes must be >= 64, got {nodes}")
    z, w = gauss_hermite_normal(nodes)
    x = p.mu + math.sqrt(p.sigma2) * z
    log_q = -0.5 * math.log(2.0 * math.pi * p.sigma2) - 0.5 * (x - p.mu) ** 2 / p.sigma2
    e_log_q = float(np.dot(w, log_q))
    sigma = math.sqrt(p.sigma2)
    e_log_abs, error = _expected_log_abs_shifted_normal(p.mu / sigma)
    if error > max_error:
        raise QuadratureError(f"oracle error estimate {error:.3g} exceeds {max_error:.3g}")
    return e_log_q + math.log(sigma) + e_log_abs - math.log(AbsoluteWithC(c).c)
