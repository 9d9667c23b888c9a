"""Gaussian-dropout linear regression fitted as penalised maximum likelihood.

The posterior over weights is a factorised Gaussian N(mu_d, sigma2_d). For a
linear-Gaussian likelihood the expected negative log-likelihood is exact:

    (N/2) log(2 pi s2) + (||y - X mu||^2 + sum_d sigma2_d ||x_d||^2) / (2 s2)

and the penalty is lambda * sum_d KL(u_d) with u_d = mu_d^2 / (2 sigma2_d)
and KL the log-uniform term up to its constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .logunif_kl import GaussianVariationalParam, kl_grad_params, kl_grad_u, kl_hess_u, kl_up_to_const


# f is only resolved to a few ulps, so near the optimum a step is judged by
# the gradient norm and f may move up by this many ulps
ROUNDING_ULPS = 8.0


class FitConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    noise_var: float = 1.0

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.targets, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError(f"inputs {x.shape} do not match {y.size} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class VgdParams:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.array(self.mu, dtype=float))
        s2 = np.atleast_1d(np.array(self.sigma2, dtype=float))
        if mu.shape != s2.shape or mu.ndim != 1:
            raise ValueError("mu and sigma2 must be 1-D of equal length")
        if not np.all(s2 > 0):
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)

    @property
    def u(self) -> np.ndarray:
        return self.mu**2 / (2.0 * self.sigma2)


@dataclass(frozen=True)
class TrainConfig:
    kl_weight: float = 1.0
    learning_rate: float = 1.0
    max_iters: int = 20_000
    grad_tol: float = 1e-9
    seed: int = 0
    sigma2_floor: float = 1e-12

    def __post_init__(self):
        if not (self.kl_weight >= 0 and math.isfinite(self.kl_weight)):
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if not (self.learning_rate > 0 and self.grad_tol > 0 and self.sigma2_floor > 0):
            raise ValueError("learning_rate, grad_tol and sigma2_floor must be positive")
        if self.max_iters < 1 or self.seed < 0:
            raise ValueError("max_iters must be >= 1 and seed >= 0")


def _check(p: VgdParams, d: Dataset):
    if p.mu.size != d.dim:
        raise ValueError(f"{p.mu.size} parameters for {d.dim} input columns")


def expected_nll(p: VgdParams, d: Dataset) -> float:
    _check(p, d)
    resid = d.targets - d.inputs @ p.mu
    col_sq = np.sum(d.inputs**2, axis=0)
    fit_term = float(resid @ resid) + float(np.dot(p.sigma2, col_sq))
    return 0.5 * d.n * math.log(2.0 * math.pi * d.noise_var) + fit_term / (2.0 * d.noise_var)


def penalty(p: VgdParams) -> float:
    """sum_d KL(u_d), up to the prior's constant."""
    return math.fsum(kl_up_to_const(float(u)) for u in p.u)


def objective(p: VgdParams, d: Dataset, cfg: TrainConfig) -> float:
    if cfg.kl_weight == 0:
        return expected_nll(p, d)
    return expected_nll(p, d) + cfg.kl_weight * penalty(p)


def objective_grad(p: VgdParams, d: Dataset, cfg: TrainConfig):
    """Gradient of ``objective`` in (mu, sigma2)."""
    _check(p, d)
    resid = d.targets - d.inputs @ p.mu
    g_mu = -(d.inputs.T @ resid) / d.noise_var
    g_s2 = np.sum(d.inputs**2, axis=0) / (2.0 * d.noise_var)
    if cfg.kl_weight:
        kl = np.array([kl_grad_params(GaussianVariationalParam(m, s)) for m, s in zip(p.mu, p.sigma2)])
        g_mu = g_mu + cfg.kl_weight * kl[:, 0]
        g_s2 = g_s2 + cfg.kl_weight * kl[:, 1]
    return g_mu, g_s2


@dataclass
class FitResult:
    params: VgdParams
    objective_trace: list = field(default_factory=list)
    grad_norm: float = math.inf
    iterations: int = 0


def _free_gradient(p: VgdParams, d: Dataset, cfg: TrainConfig, log_floor: float):
    g_mu, g_s2 = objective_grad(p, d, cfg)
    g_l = g_s2 * p.sigma2
    # at the floor a push downward cannot be followed, so it is not counted
    g_l = np.where((np.log(p.sigma2) <= log_floor) & (g_l > 0), 0.0, g_l)
    return g_mu, g_l


def _hessian(p: VgdParams, d: Dataset, cfg: TrainConfig) -> np.ndarray:
    """Exact Hessian in (mu, log sigma2), ordered [mu_1..mu_D, l_1..l_D]."""
    dim = d.dim
    h = np.zeros((2 * dim, 2 * dim))
    h[:dim, :dim] = d.inputs.T @ d.inputs / d.noise_var
    col_sq = np.sum(d.inputs**2, axis=0)
    h_ll = col_sq * p.sigma2 / (2.0 * d.noise_var)
    h_ml = np.zeros(dim)
    if cfg.kl_weight:
        u = p.u
        k1 = np.array([kl_grad_u(float(x)) for x in u])
        k2 = np.array([kl_hess_u(float(x)) for x in u])
        du_dm = p.mu / p.sigma2
        lam = cfg.kl_weight
        h[np.arange(dim), np.arange(dim)] += lam * (k2 * du_dm**2 + k1 / p.sigma2)
        h_ml = -lam * du_dm * (k2 * u + k1)
        h_ll = h_ll + lam * u * (k2 * u + k1)
    idx = np.arange(dim)
    h[idx, dim + idx] = h_ml
    h[dim + idx, idx] = h_ml
    h[dim + idx, dim + idx] = h_ll
    return h


def _newton_direction(h: np.ndarray, g: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Newton step on the free block with absolute, floored eigenvalues.

    The block is first scaled to unit diagonal: curvatures in mu and in
    log sigma2 can differ by more than 1e12 near the variance floor.
    """
    step = np.zeros_like(g)
    if not np.any(free):
        return step
    hf = h[np.ix_(free, free)]
    scale = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(hf)), np.finfo(float).tiny))
    vals, vecs = np.linalg.eigh(hf * np.outer(scale, scale))
    mags = np.maximum(np.abs(vals), 1e-10 * float(np.abs(vals).max()))
    step[free] = scale * (vecs @ ((vecs.T @ (scale * g[free])) / mags))
    return step


def fit_with_trace(d: Dataset, cfg: TrainConfig = TrainConfig()) -> FitResult:
    """Projected Newton on (mu, log sigma2) with Armijo backtracking.

    Indefinite curvature is handled by taking absolute eigenvalues. Variances
    sitting on ``cfg.sigma2_floor`` with a downward gradient are held fixed
    for the step. Steps must pass Armijo, except once the predicted decrease
    is below the rounding of f, where they must reduce the gradient norm and
    may raise f by at most ``ROUNDING_ULPS`` ulps. Converges when the free
    gradient norm is below ``cfg.grad_tol``.

    Raises:
        FitConvergenceError: if ``cfg.max_iters`` is reached first.
    """
    rng = np.random.default_rng(cfg.seed)
    log_floor = math.log(cfg.sigma2_floor)
    dim = d.dim
    mu = 0.01 * rng.standard_normal(dim)
    ell = np.zeros(dim)
    p = VgdParams(mu, np.exp(ell))
    f = objective(p, d, cfg)
    res = FitResult(p, [f])
    for it in range(1, cfg.max_iters + 1):
        g_mu, g_l = _free_gradient(p, d, cfg, log_floor)
        gnorm = math.sqrt(float(g_mu @ g_mu + g_l @ g_l))
        res.grad_norm = gnorm
        if gnorm < cfg.grad_tol:
            res.iterations = it - 1
            return res
        at_floor = (ell <= log_floor) & (g_l >= 0)
        free = np.concatenate([np.ones(dim, dtype=bool), ~at_floor])
        g = np.concatenate([g_mu, g_l])
        h = _hessian(p, d, cfg)
        step = _newton_direction(h, g, free)
        # h_ll - g_l = lambda u (2K' + u K'') > 0 whenever an interior minimum
        # in log sigma2 can exist; without it f only falls toward the floor
        h_ll = np.diag(h)[dim:]
        to_floor = ~at_floor & (g_l > 0) & (h_ll <= g_l * (1.0 + 1e-12))
        step[dim:] = np.where(to_floor, ell - log_floor, step[dim:])
        decrease = float(g @ step)
        t = cfg.learning_rate
        while True:
            ell_new = np.maximum(ell - t * step[dim:], log_floor)
            p_new = VgdParams(mu - t * step[:dim], np.exp(ell_new))
            f_new = objective(p_new, d, cfg)
            required = 1e-4 * t * decrease
            if f_new <= f - required:
                break
            # below the rounding of f a decrease cannot be observed; judge the
            # step by the gradient norm instead
            if t * decrease <= ROUNDING_ULPS * np.spacing(abs(f)) and f_new <= f + ROUNDING_ULPS * np.spacing(abs(f)):
                gm_new, gl_new = _free_gradient(p_new, d, cfg, log_floor)
                if float(gm_new @ gm_new + gl_new @ gl_new) < gnorm * gnorm:
                    break
            if t < 1e-20:
                break
            t *= 0.5
        if t < 1e-20:
            # neither merit improves along the direction; stay put
            res.iterations = it
            break
        mu, ell, p, f = p_new.mu, ell_new, p_new, f_new
        res.params = p
        res.objective_trace.append(f)
        res.iterations = it
    g_mu, g_l = _free_gradient(p, d, cfg, log_floor)
    res.grad_norm = math.sqrt(float(g_mu @ g_mu + g_l @ g_l))
    if res.grad_norm < cfg.grad_tol:
        return res
    raise FitConvergenceError(
        f"gradient norm {res.grad_norm:.3g} above grad_tol {cfg.grad_tol:.3g} after {res.iterations} iterations",
        res.grad_norm,
    )


def fit(d: Dataset, cfg: TrainConfig = TrainConfig()) -> VgdParams:
    return fit_with_trace(d, cfg).params


def lambda_sweep(d: Dataset, lambdas, cfg: TrainConfig = TrainConfig()) -> list:
    """(lambda, fitted params) for each weight, every run with the same seed."""
    out = []
    for lam in lambdas:
        run = TrainConfig(float(lam), cfg.learning_rate, cfg.max_iters, cfg.grad_tol, cfg.seed, cfg.sigma2_floor)
        out.append((float(lam), fit(d, run)))
    return out


def least_squares(d: Dataset) -> np.ndarray:
    return np.linalg.solve(d.inputs.T @ d.inputs, d.inputs.T @ d.targets)


def make_synthetic(n: int = 40, dim: int = 3, noise_var: float = 0.25, seed: int = 0) -> Dataset:
    """Gaussian inputs, weights spaced on [-1, 2], Gaussian noise of variance ``noise_var``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    w = np.linspace(-1.0, 2.0, dim)
    y = x @ w + math.sqrt(noise_var) * rng.standard_normal(n)
    return Dataset(x, y, noise_var)


def load_dataset(path, noise_var: float = 1.0) -> Dataset:
    """Comma-separated file with a header row; the last column is the target."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one sample")
    width = len(rows[0])
    if width < 2:
        raise ValueError(f"{path}: need at least one input column and a target column")
    body = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ValueError(f"{path}:{i}: expected {width} fields, got {len(row)}")
        body.append([float(v) for v in row])
    arr = np.array(body, dtype=float)
    return Dataset(arr[:, :-1], arr[:, -1], noise_var)


def write_dataset(d: Dataset, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d.dim)] + ["y"])
        for xr, yv in zip(d.inputs, d.targets):
            w.writerow([format(float(v), ".17g") for v in xr] + [format(float(yv), ".17g")])
