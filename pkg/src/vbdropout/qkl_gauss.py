"""Quasi-KL fit of a degenerate Gaussian N(0, A V A^T) to a full-rank N(0, Sigma).

A is D x K with orthonormal columns and V is a positive diagonal. Up to a
constant the objective is

    QKL(A, V) = -1/2 sum_k log V_k + 1/2 tr(A^T Sigma^-1 A V),

whose minimisers put the columns of A on the top-K eigenvectors of Sigma and
V on the matching eigenvalues. Every other choice of K eigenvectors is a
stationary point too, so descent needs random restarts.

Adding isotropic noise tau I to the degenerate covariance gives an ordinary
Gaussian KL whose minimiser has V_k = gamma_k - tau and the same A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NotPositiveDefiniteError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Descent stopped at max_iters with the gradient norm above grad_tol."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


# ---------------------------------------------------------------------------
# dense linear algebra


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = m; raises if m is not positive definite."""
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    low = np.zeros_like(m)
    for j in range(n):
        d = m[j, j] - low[j, :j] @ low[j, :j]
        if not d > 0:
            raise NotPositiveDefiniteError(f"non-positive pivot {d:.3g} at column {j}")
        low[j, j] = math.sqrt(d)
        low[j + 1 :, j] = (m[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def _forward(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.array(b, dtype=float)
    for i in range(low.shape[0]):
        x[i] = (x[i] - low[i, :i] @ x[:i]) / low[i, i]
    return x


def _backward(up: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.array(b, dtype=float)
    n = up.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - up[i, i + 1 :] @ x[i + 1 :]) / up[i, i]
    return x


def cholesky_solve(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _backward(low.T, _forward(low, b))


def jacobi_eigh(m: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Args:
        m: symmetric matrix.
        tol: sweeps stop once the off-diagonal Frobenius norm is at most
            ``tol * ||m||_F``.
        max_sweeps: cap on full sweeps.

    Returns:
        (eigenvalues descending, eigenvectors as columns, final off-diagonal norm).
    """
    a = np.array(m, dtype=float)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)

    def off_norm():
        return math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))

    for _ in range(max_sweeps):
        if off_norm() <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])):
                    # below rounding of the diagonal: dropping it changes nothing
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order], off_norm()


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Thin QR factor with positive diagonal R, by twice-repeated Gram-Schmidt."""
    q = np.array(m, dtype=float)
    k = q.shape[1]
    for j in range(k):
        for _ in range(2):
            q[:, j] -= q[:, :j] @ (q[:, :j].T @ q[:, j])
        norm = np.linalg.norm(q[:, j])
        if not norm > 0:
            raise ValueError("columns are linearly dependent")
        q[:, j] /= norm
    return q


def householder_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix as a product of d Householder reflections."""
    q = np.eye(d)
    for _ in range(d):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        q = q - 2.0 * np.outer(q @ v, v)
    return q


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SpdMatrix:
    entries: np.ndarray
    _inv: np.ndarray = field(init=False, repr=False, compare=False)
    _logdet: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix has non-finite entries")
        if np.max(np.abs(m - m.T)) > 1e-12 * max(1.0, np.max(np.abs(m))):
            raise ValueError("matrix is not symmetric to 1e-12")
        m = 0.5 * (m + m.T)
        vals, _, _ = jacobi_eigh(m)
        if not vals[-1] > 0:
            raise NotPositiveDefiniteError(f"smallest eigenvalue {vals[-1]:.3g} is not positive")
        low = cholesky(m)
        inv = np.column_stack([cholesky_solve(low, e) for e in np.eye(m.shape[0])])
        m.setflags(write=False)
        inv = 0.5 * (inv + inv.T)
        inv.setflags(write=False)
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "_inv", inv)
        object.__setattr__(self, "_logdet", 2.0 * float(np.sum(np.log(np.diag(low)))))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return self._inv

    @property
    def logdet(self) -> float:
        return self._logdet


@dataclass(frozen=True)
class DegenerateGaussian:
    """Zero-mean Gaussian with covariance A diag(V) A^T, A orthonormal (D x K)."""

    factor: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        a = np.array(self.factor, dtype=float)
        v = np.array(self.diag, dtype=float).ravel()
        if a.ndim != 2 or a.shape[1] != v.size or a.shape[1] > a.shape[0]:
            raise ValueError(f"factor shape {a.shape} incompatible with {v.size} variances")
        if np.max(np.abs(a.T @ a - np.eye(v.size))) > 1e-10:
            raise ValueError("factor columns are not orthonormal to 1e-10")
        if not np.all(v > 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "factor", a)
        object.__setattr__(self, "diag", v)

    @property
    def dim(self) -> int:
        return self.factor.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 20_000
    step_size: float = 0.1
    grad_tol: float = 1e-11
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or not self.step_size > 0 or not self.grad_tol > 0:
            raise ValueError("max_iters, step_size and grad_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class TauSchedule:
    taus: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.taus)
        if not t:
            raise ValueError("schedule is empty")
        if not all(x > 0 for x in t):
            raise ValueError("noise levels must be positive")
        if not all(x > y for x, y in zip(t, t[1:])):
            raise ValueError("noise levels must be strictly decreasing")
        object.__setattr__(self, "taus", t)


def _check_dims(g: DegenerateGaussian, target: SpdMatrix):
    if g.dim != target.dim:
        raise ValueError(f"dimension mismatch: factor has {g.dim} rows, target is {target.dim}")


# ---------------------------------------------------------------------------
# objectives


def qkl_value(g: DegenerateGaussian, target: SpdMatrix) -> float:
    """-1/2 sum log V_k + 1/2 tr(A^T Sigma^-1 A V), without the additive constant."""
    _check_dims(g, target)
    quad = np.einsum("dk,de,ek->k", g.factor, target.inverse, g.factor)
    return float(-0.5 * np.sum(np.log(g.diag)) + 0.5 * np.dot(quad, g.diag))


def qkl_grad(g: DegenerateGaussian, target: SpdMatrix):
    """Euclidean gradients (dQKL/dA, dQKL/dV); project dA with ``tangent_project``."""
    _check_dims(g, target)
    sa = target.inverse @ g.factor
    quad = np.einsum("dk,dk->k", g.factor, sa)
    return sa * g.diag, -0.5 / g.diag + 0.5 * quad


def tangent_project(a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Project a D x K matrix onto the tangent space of the Stiefel manifold at A."""
    m = a.T @ grad
    return grad - a @ (0.5 * (m + m.T))


def convolved_kl(g: DegenerateGaussian, tau: float, target: SpdMatrix) -> float:
    """KL(N(0, A V A^T + tau I) || N(0, Sigma)) in closed form."""
    _check_dims(g, target)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    d, k = g.dim, g.rank
    sinv = target.inverse
    quad = np.einsum("dk,de,ek->k", g.factor, sinv, g.factor)
    trace = float(np.dot(quad, g.diag)) + tau * float(np.trace(sinv))
    # A has orthonormal columns, so A V A^T + tau I has eigenvalues V + tau and tau.
    logdet_c = float(np.sum(np.log(g.diag + tau))) + (d - k) * math.log(tau)
    return 0.5 * (trace - d + target.logdet - logdet_c)


def convolved_kl_grad(g: DegenerateGaussian, tau: float, target: SpdMatrix):
    """Euclidean gradients of ``convolved_kl`` in (A, V)."""
    _check_dims(g, target)
    sa = target.inverse @ g.factor
    quad = np.einsum("dk,dk->k", g.factor, sa)
    # the log-det term depends on A only through A^T A, so it adds a normal component
    grad_a = sa * g.diag - g.factor * (g.diag / (g.diag + tau))
    return grad_a, 0.5 * quad - 0.5 / (g.diag + tau)


# ---------------------------------------------------------------------------
# descent on the Stiefel manifold x log-variances


@dataclass(frozen=True)
class DescentResult:
    point: DegenerateGaussian
    value: float
    grad_norm: float
    iterations: int
    converged: bool


Objective = Callable[[DegenerateGaussian], float]
Gradient = Callable[[DegenerateGaussian], tuple]


def riemannian_descent(
    value: Objective,
    grad: Gradient,
    start: DegenerateGaussian,
    cfg: OptimConfig,
    memory: int = 10,
) -> DescentResult:
    """Projected-gradient descent on (A, log V) with QR retraction.

    Step lengths follow alternating Barzilai-Borwein rules, safeguarded by a
    non-monotone Armijo test against the largest of the last ``memory``
    accepted values, with an allowance of 1e-14 relative for rounding in the
    objective. Stops when the Riemannian gradient norm drops below
    ``cfg.grad_tol``. The test is on the gradient because values near the
    optimum stop changing in floating point long before the iterate does.
    """
    a = start.factor.copy()
    s = np.log(start.diag)

    def evaluate(a_, s_):
        pt = DegenerateGaussian(a_, np.exp(s_))
        ga, gv = grad(pt)
        # chain rule for V = exp(s)
        return pt, value(pt), tangent_project(a_, ga), gv * pt.diag

    point, f, xi, gs = evaluate(a, s)
    history = [f]
    step = cfg.step_size
    gnorm = math.sqrt(float(np.sum(xi * xi) + np.sum(gs * gs)))
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if gnorm <= cfg.grad_tol:
            return DescentResult(point, f, gnorm, it - 1, True)
        ref = max(history[-memory:])
        g2 = gnorm * gnorm
        # unit cap on the displacement keeps exp(s) and the retraction in range
        trial_step = min(step, 1.0 / gnorm)
        while True:
            a_new = orthonormalize(a - trial_step * xi)
            s_new = s - trial_step * gs
            p_new, f_new, xi_new, gs_new = evaluate(a_new, s_new)
            # the allowance lets BB steps through once f is flat to rounding
            slack = 1e-14 * max(1.0, abs(ref))
            if f_new <= ref - 1e-4 * trial_step * g2 + slack or trial_step < 1e-16:
                break
            trial_step *= 0.5
        da, ds = a_new - a, s_new - s
        ya, ys = xi_new - xi, gs_new - gs
        sy = float(np.sum(da * ya) + np.dot(ds, ys))
        if sy > 0:
            if it % 2:
                step = float(np.sum(da * da) + np.dot(ds, ds)) / sy
            else:
                step = sy / float(np.sum(ya * ya) + np.dot(ys, ys))
        else:
            step = 2.0 * trial_step
        step = min(max(step, 1e-10), 1e10)
        a, s, point, f, xi, gs = a_new, s_new, p_new, f_new, xi_new, gs_new
        history.append(f)
        gnorm = math.sqrt(float(np.sum(xi * xi) + np.sum(gs * gs)))
    return DescentResult(point, f, gnorm, cfg.max_iters, gnorm <= cfg.grad_tol)


def _random_start(d: int, k: int, rng: np.random.Generator, target: SpdMatrix, tau: float = 0.0):
    a = orthonormalize(rng.standard_normal((d, k)))
    quad = np.einsum("dk,de,ek->k", a, target.inverse, a)
    # stationary V for this A, floored so the noisy objective starts feasible
    v = np.maximum(1.0 / quad - tau, 1e-3 / quad)
    return DegenerateGaussian(a, v)


def _best_of_restarts(value, grad, target, k, cfg, tau=0.0, extra_starts=()):
    rng = np.random.default_rng(cfg.seed)
    starts = list(extra_starts) + [
        _random_start(target.dim, k, rng, target, tau) for _ in range(cfg.restarts)
    ]
    results = [riemannian_descent(value, grad, st, cfg) for st in starts]
    best = min(results, key=lambda r: (not r.converged, r.value))
    if not best.converged:
        raise ConvergenceError(
            f"gradient norm {best.grad_norm:.3g} above grad_tol {cfg.grad_tol:.3g} "
            f"after {cfg.max_iters} iterations",
            best.grad_norm,
        )
    return best


def optimize_qkl(target: SpdMatrix, k: int, cfg: OptimConfig = OptimConfig()) -> DegenerateGaussian:
    """Best QKL minimiser over ``cfg.restarts`` seeded random starts.

    Raises:
        ValueError: if k is outside [1, D].
        ConvergenceError: if no restart reaches ``cfg.grad_tol``.
    """
    if not 1 <= k <= target.dim:
        raise ValueError(f"rank {k} outside [1, {target.dim}]")
    best = _best_of_restarts(
        lambda g: qkl_value(g, target), lambda g: qkl_grad(g, target), target, k, cfg
    )
    return best.point


def pca_oracle(target: SpdMatrix, k: int) -> DegenerateGaussian:
    """Top-k eigenpairs of the target from the Jacobi eigensolver."""
    if not 1 <= k <= target.dim:
        raise ValueError(f"rank {k} outside [1, {target.dim}]")
    vals, vecs, _ = jacobi_eigh(target.entries)
    return DegenerateGaussian(vecs[:, :k], vals[:k])


def _is_degenerate(values: np.ndarray, tol: float) -> bool:
    v = np.sort(values)[::-1]
    return bool(np.any(np.abs(np.diff(v)) <= tol * np.max(np.abs(v))))


def align(g: DegenerateGaussian, ref: DegenerateGaussian) -> DegenerateGaussian:
    """Reorder and sign-flip the columns of ``g`` to best match ``ref``.

    Columns are matched greedily by largest absolute inner product.
    """
    if g.factor.shape != ref.factor.shape:
        raise ValueError(f"shape mismatch {g.factor.shape} vs {ref.factor.shape}")
    k = ref.rank
    overlap = np.abs(ref.factor.T @ g.factor)
    order = np.empty(k, dtype=int)
    free_r, free_g = set(range(k)), set(range(k))
    for _ in range(k):
        r, c = max(((r, c) for r in sorted(free_r) for c in sorted(free_g)), key=lambda rc: overlap[rc])
        order[r] = c
        free_r.discard(r)
        free_g.discard(c)
    a = g.factor[:, order]
    signs = np.where(np.sum(a * ref.factor, axis=0) < 0, -1.0, 1.0)
    return DegenerateGaussian(a * signs, g.diag[order])


def alignment_distance(
    g: DegenerateGaussian, ref: DegenerateGaussian, degenerate_tol: float = 1e-8
) -> float:
    """Distance between two factor/variance pairs up to column order and sign.

    After ``align`` the distance is ||A - A_ref||_F + ||V - V_ref||_2. When
    two reference variances agree to ``degenerate_tol`` (relative) the
    eigenvectors are not identifiable, so the factor part becomes the
    projector gap ||A A^T - A_ref A_ref^T||_F and the variances are compared
    after sorting.
    """
    if g.factor.shape != ref.factor.shape:
        raise ValueError(f"shape mismatch {g.factor.shape} vs {ref.factor.shape}")
    if _is_degenerate(ref.diag, degenerate_tol):
        proj = g.factor @ g.factor.T - ref.factor @ ref.factor.T
        vdiff = np.sort(g.diag)[::-1] - np.sort(ref.diag)[::-1]
        return float(np.linalg.norm(proj) + np.linalg.norm(vdiff))
    al = align(g, ref)
    return float(np.linalg.norm(al.factor - ref.factor) + np.linalg.norm(al.diag - ref.diag))


@dataclass(frozen=True)
class TauRecord:
    tau: float
    solution: DegenerateGaussian
    distance: float


def tau_sweep(
    target: SpdMatrix, k: int, sched: TauSchedule, cfg: OptimConfig = OptimConfig()
) -> list[TauRecord]:
    """Minimise the noise-convolved KL along a decreasing noise schedule.

    Each level is started from the previous solution as well as from
    ``cfg.restarts`` random frames; the lowest converged value is kept.

    Raises:
        ValueError: if some tau is not below the k-th eigenvalue.
    """
    oracle = pca_oracle(target, k)
    gamma_k = float(oracle.diag[-1])
    for tau in sched.taus:
        if not tau < gamma_k:
            raise ValueError(f"tau = {tau} is not below the rank-{k} eigenvalue {gamma_k}")
    records = []
    previous: Optional[DegenerateGaussian] = None
    for tau in sched.taus:
        warm = ()
        if previous is not None:
            # the stationary variances shift by the change in tau
            v = np.maximum(previous.diag + (records[-1].tau - tau), 1e-300)
            warm = (DegenerateGaussian(previous.factor, v),)
        best = _best_of_restarts(
            lambda g, t=tau: convolved_kl(g, t, target),
            lambda g, t=tau: convolved_kl_grad(g, t, target),
            target,
            k,
            cfg,
            tau,
            warm,
        )
        previous = best.point
        records.append(TauRecord(tau, best.point, alignment_distance(best.point, oracle)))
    return records


def random_spd(
    d: int,
    rng: np.random.Generator,
    min_gap: float = 0.1,
    low: float = 0.5,
    high: float = 5.0,
):
    """Random SPD matrix Q diag(lam) Q^T with a planted, well-separated spectrum.

    Returns:
        (SpdMatrix, eigenvalues in descending order).
    """
    if (d - 1) * min_gap >= high - low:
        raise ValueError("spectrum range too narrow for the requested gap")
    while True:
        lam = np.sort(rng.uniform(low, high, size=d))[::-1]
        if d == 1 or np.min(-np.diff(lam)) > min_gap:
            break
    q = householder_orthogonal(d, rng)
    m = (q * lam) @ q.T
    return SpdMatrix(0.5 * (m + m.T)), lam


def spd_from_spectrum(eigenvalues: Sequence[float], rng: np.random.Generator) -> SpdMatrix:
    lam = np.asarray(eigenvalues, dtype=float)
    q = householder_orthogonal(lam.size, rng)
    m = (q * lam) @ q.T
    return SpdMatrix(0.5 * (m + m.T))
