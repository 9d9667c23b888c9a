"""Shifted-KL sequences that converge to the quasi-KL of a singular approximation.

A discrete or lower-dimensional Q has no density with respect to P, so
KL(Q || P) is infinite. Two regularisations make it finite and, after
subtracting a Q-independent offset, converge to E_Q[log(q/p)]:

* convolution: Q_n = Q * N(0, I/n), offset -(D/2) log(2 pi e / n);
* discretisation: both measures quantised to cells of side delta,
  offset -D log(delta).

For a Gaussian supported on a K_S-dimensional coordinate subspace the
convolved KL is closed-form and the offset becomes
-((D - K_S)/2) log(2 pi e / n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .qkl_gauss import SpdMatrix
from .quadrature import QuadratureError, adaptive_simpson, gauss_hermite_normal
from .specfun import std_normal_cdf, std_normal_sf

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely many atoms (rows of ``atoms``) with positive weights summing to one."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if atoms.ndim != 2 or atoms.shape[0] != w.size or w.size == 0:
            raise ValueError(f"{atoms.shape[0]} atoms but {w.size} weights")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if not np.all(w > 0):
            raise ValueError("weights must be positive")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {np.sum(w)!r}, not 1")
        if np.unique(atoms, axis=0).shape[0] != atoms.shape[0]:
            raise ValueError("atoms must be pairwise distinct")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


class ContinuousTarget(Protocol):
    dim: int

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """log p at the rows of an (M, D) array."""

    def cell_mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """P-mass of the boxes [lo, hi] given as (M, D) arrays of corners."""


@dataclass(frozen=True)
class DiagonalGaussianTarget:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.array(self.mean, dtype=float))
        v = np.atleast_1d(np.array(self.var, dtype=float))
        if m.shape != v.shape or m.ndim != 1:
            raise ValueError("mean and var must be 1-D of equal length")
        if not np.all(v > 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "var", v)

    @classmethod
    def standard(cls, dim: int = 1) -> "DiagonalGaussianTarget":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, x):
        z2 = (np.asarray(x, dtype=float) - self.mean) ** 2 / self.var
        return -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.var)) + np.sum(z2, axis=-1))

    def cell_mass(self, lo, hi):
        sd = np.sqrt(self.var)
        zl = (np.asarray(lo, dtype=float) - self.mean) / sd
        zh = (np.asarray(hi, dtype=float) - self.mean) / sd
        # upper-tail difference when the cell is right of the mean keeps precision
        mass = np.where(zl >= 0, std_normal_sf(zl) - std_normal_sf(zh), std_normal_cdf(zh) - std_normal_cdf(zl))
        return np.prod(mass, axis=-1)


@dataclass(frozen=True)
class CallableTarget:
    """Target given by a log-density callable; supports convolution but not cell masses."""

    dim: int
    log_density_fn: Callable[[np.ndarray], np.ndarray]

    def log_density(self, x):
        return np.asarray(self.log_density_fn(np.asarray(x, dtype=float)), dtype=float)

    def cell_mass(self, lo, hi):
        raise NotImplementedError("cell masses are only available for Gaussian targets")


@dataclass(frozen=True)
class LimitRecord:
    n: float
    kl: float
    offset: float
    gap: float

    @classmethod
    def from_kl(cls, n: float, kl: float, offset: float) -> "LimitRecord":
        return cls(n, kl, offset, kl - offset)

    def __post_init__(self):
        if not (self.gap == self.kl - self.offset or math.isnan(self.gap)):
            raise ValueError("gap must equal kl - offset")


@dataclass(frozen=True)
class QuadratureConfig:
    abs_tol: float = 1e-9
    max_subdivisions: int = 200_000
    domain_padding: float = 12.0
    hermite_nodes: int = 96
    hermite_tol: float = 1e-6

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.hermite_tol > 0):
            raise ValueError("abs_tol and hermite_tol must be positive")
        if self.max_subdivisions < 1 or not self.domain_padding > 0 or self.hermite_nodes < 2:
            raise ValueError("max_subdivisions, domain_padding and hermite_nodes must be positive")


def _check_target(q: DiscreteMeasure, target) -> None:
    if q.dim != target.dim:
        raise ValueError(f"measure has dimension {q.dim}, target {target.dim}")


def qkl_discrete(q: DiscreteMeasure, target) -> float:
    """sum_i rho_i (log rho_i - log p(m_i)).

    Raises:
        ValueError: if the target density vanishes at an atom.
    """
    _check_target(q, target)
    log_p = np.asarray(target.log_density(q.atoms), dtype=float)
    if not np.all(np.isfinite(log_p)):
        raise ValueError("target density is zero at an atom")
    return float(np.sum(q.weights * (np.log(q.weights) - log_p)))


def convolution_offset(dim: int, n: float) -> float:
    return -0.5 * dim * math.log(2.0 * math.pi * math.e / n)


def discretisation_offset(dim: int, delta: float) -> float:
    return -dim * math.log(delta)


def _log_mixture(q: DiscreteMeasure, n: float, x: np.ndarray) -> np.ndarray:
    """log of the density of Q * N(0, I/n) at the rows of x."""
    d2 = np.sum((x[:, None, :] - q.atoms[None, :, :]) ** 2, axis=-1)
    return logsumexp(np.log(q.weights) - 0.5 * n * d2, axis=1) + 0.5 * q.dim * math.log(n / (2.0 * math.pi))


def _windows(q: DiscreteMeasure, n: float, pad: float) -> list:
    half = pad / math.sqrt(n)
    spans = sorted((m - half, m + half) for m in q.atoms[:, 0])
    merged = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def convolved_mass(q: DiscreteMeasure, n: float, quad: QuadratureConfig = QuadratureConfig()) -> float:
    """Integral of the one-dimensional mixture density over the padded windows plus its analytic tail."""
    if q.dim != 1:
        raise ValueError("mass check is implemented for one dimension")
    wins = _windows(q, n, quad.domain_padding)
    tol = quad.abs_tol / len(wins)

    def dens(x):
        return np.exp(_log_mixture(q, n, x[:, None]))

    inside = sum(adaptive_simpson(dens, lo, hi, tol, quad.max_subdivisions).value for lo, hi in wins)
    return inside + _tail_mass(q, n, wins)


def _tail_mass(q: DiscreteMeasure, n: float, wins) -> float:
    # exact Gaussian tails of every component outside the union of windows
    sd = 1.0 / math.sqrt(n)
    m = q.atoms[:, 0]
    outside = std_normal_cdf((wins[0][0] - m) / sd) + std_normal_sf((wins[-1][1] - m) / sd)
    for (_, hi), (lo, _) in zip(wins[:-1], wins[1:]):
        outside = outside + std_normal_cdf((lo - m) / sd) - std_normal_cdf((hi - m) / sd)
    return float(np.sum(q.weights * outside))


def _convolved_kl_simpson(q, target, n, quad):
    wins = _windows(q, n, quad.domain_padding)
    tol = quad.abs_tol / (2 * len(wins))

    def integrand(x):
        pts = x[:, None]
        log_q = _log_mixture(q, n, pts)
        return np.exp(log_q) * (log_q - target.log_density(pts))

    kl = 0.0
    err = 0.0
    for lo, hi in wins:
        res = adaptive_simpson(integrand, lo, hi, tol, quad.max_subdivisions)
        kl += res.value
        err += res.error
    tail = _tail_mass(q, n, wins)
    # tail remainder: mass beyond the windows times the log-ratio scale there
    edges = np.array([[w[0]] for w in wins] + [[w[1]] for w in wins])
    scale = float(np.max(np.abs(_log_mixture(q, n, edges) - target.log_density(edges))))
    err += tail * (scale + quad.domain_padding**2)
    mass = convolved_mass(q, n, quad)
    if abs(mass - 1.0) > quad.abs_tol:
        raise QuadratureError(f"mixture mass {mass!r} differs from 1 by more than {quad.abs_tol}")
    return kl, err


def _convolved_kl_hermite(q, target, n, nodes):
    z, w = gauss_hermite_normal(nodes)
    d = q.dim
    grids = np.meshgrid(*([z] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) / math.sqrt(n)
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij")), axis=0).ravel()
    total = 0.0
    for rho, m in zip(q.weights, q.atoms):
        x = m + pts
        total += float(rho) * float(np.dot(wts, _log_mixture(q, n, x) - target.log_density(x)))
    return total


def convolved_kl(q: DiscreteMeasure, target, n: float, quad: QuadratureConfig = QuadratureConfig()) -> float:
    """KL(Q * N(0, I/n) || P).

    One dimension uses adaptive Simpson over the merged windows
    m_i +- domain_padding / sqrt(n) with an analytic tail remainder and a
    unit-mass self-check, checked against ``quad.abs_tol``. Higher
    dimensions use a tensor Gauss-Hermite rule per mixture component; the
    error estimate is the change from ``hermite_nodes`` (capped at 40 per
    axis in three dimensions) to 1.5 times as many nodes, checked against
    ``quad.hermite_tol``. Overlapping components converge slowly under
    Gauss-Hermite, hence the separate tolerance.

    Raises:
        QuadratureError: if the error estimate exceeds its tolerance.
    """
    _check_target(q, target)
    if not n > 0:
        raise ValueError(f"n must be positive, got {n}")
    if q.dim == 1:
        kl, err = _convolved_kl_simpson(q, target, n, quad)
        tol = quad.abs_tol
    else:
        if q.dim > 3:
            raise ValueError("quadrature convolution is limited to D <= 3")
        nodes = quad.hermite_nodes if q.dim == 2 else min(quad.hermite_nodes, 40)
        kl = _convolved_kl_hermite(q, target, n, nodes)
        err = abs(_convolved_kl_hermite(q, target, n, (3 * nodes) // 2) - kl)
        tol = quad.hermite_tol
    if not err <= tol:
        raise QuadratureError(f"KL error estimate {err:.3g} above {tol:.3g} at n={n}")
    return kl


def _check_increasing(ns: Sequence[float]) -> list:
    ns = [float(x) for x in ns]
    if not ns or any(x <= 0 for x in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("schedule must be a non-empty increasing sequence of positive numbers")
    return ns


def convolved_gap_sequence(
    q: DiscreteMeasure,
    target,
    ns: Sequence[float] = (1e1, 1e2, 1e3, 1e4),
    quad: QuadratureConfig = QuadratureConfig(),
) -> list[LimitRecord]:
    """Records (n, KL(Q_n || P), s_n, gap) for the convolution schedule."""
    ns = _check_increasing(ns)
    return [LimitRecord.from_kl(n, convolved_kl(q, target, n, quad), convolution_offset(q.dim, n)) for n in ns]


def default_deltas(levels: int = 8, first: float = 0.5) -> list[float]:
    return [first / 2**j for j in range(levels)]


def default_bounds(q: DiscreteMeasure, deltas: Sequence[float], margin: float = 1.0):
    """Box whose finest grid puts atoms on a grid of spacing delta_min at cell centres.

    The lower corner is offset by half the finest cell, so atoms whose
    coordinates are multiples of the finest cell size sit mid-cell at the
    finest level and strictly inside cells at every coarser level.
    """
    coarse, fine = deltas[0], deltas[-1]
    lo = np.min(q.atoms, axis=0) - margin - 0.5 * fine
    cells = np.ceil((np.max(q.atoms, axis=0) + margin - lo) / coarse)
    return lo, lo + cells * coarse


def _check_deltas(deltas: Sequence[float]) -> list:
    ds = [float(x) for x in deltas]
    if not ds or not all(x > 0 for x in ds):
        raise ValueError("cell sizes must be positive")
    if any(b != 0.5 * a for a, b in zip(ds, ds[1:])):
        raise ValueError("each cell size must be exactly half the previous one")
    return ds


def discretised_kl(q: DiscreteMeasure, target, delta: float, lo: np.ndarray, boundary_tol: float = 1e-9) -> float:
    """sum_a q_a log(q_a / p_a) over the cells of side delta anchored at ``lo``.

    Raises:
        ValueError: if an atom lies within ``boundary_tol * delta`` of a cell
            face, or a cell holding Q-mass has zero P-mass.
    """
    pos = (q.atoms - lo) / delta
    idx = np.floor(pos)
    frac = pos - idx
    if np.any((frac < boundary_tol) | (frac > 1.0 - boundary_tol)):
        raise ValueError(f"an atom lies on a cell boundary at delta={delta}")
    cells, inverse = np.unique(idx, axis=0, return_inverse=True)
    q_a = np.bincount(inverse.ravel(), weights=q.weights, minlength=cells.shape[0])
    corner = lo + cells * delta
    p_a = np.asarray(target.cell_mass(corner, corner + delta), dtype=float)
    if np.any(~(p_a > 0)):
        raise ValueError(f"a cell holding Q-mass has zero P-mass at delta={delta}")
    return float(np.sum(q_a * (np.log(q_a) - np.log(p_a))))


def discretised_gap_sequence(
    q: DiscreteMeasure,
    target,
    deltas: Optional[Sequence[float]] = None,
    bounds: Optional[tuple] = None,
) -> list[LimitRecord]:
    """Records (delta, discrete KL, -D log delta, gap) for a halving grid schedule.

    Args:
        q: the discrete approximation.
        target: must provide ``cell_mass``.
        deltas: halving cell sizes, coarsest first (default 1/2 .. 1/256).
        bounds: (lo, hi) corners of a box containing every atom whose side
            lengths are multiples of the coarsest cell; defaults to
            ``default_bounds``.

    Raises:
        ValueError: on a malformed schedule or box, or an atom on a cell face.
    """
    _check_target(q, target)
    ds = _check_deltas(default_deltas() if deltas is None else deltas)
    lo, hi = default_bounds(q, ds) if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    lo = np.broadcast_to(lo, (q.dim,)).astype(float)
    hi = np.broadcast_to(hi, (q.dim,)).astype(float)
    ratio = (hi - lo) / ds[0]
    if np.any(ratio < 1) or np.any(np.abs(ratio - np.round(ratio)) > 1e-9):
        raise ValueError("box side lengths must be positive multiples of the coarsest cell")
    if np.any(q.atoms <= lo) or np.any(q.atoms >= hi):
        raise ValueError("every atom must lie strictly inside the box")
    return [
        LimitRecord.from_kl(d, discretised_kl(q, target, d, lo), discretisation_offset(q.dim, d)) for d in ds
    ]


def degenerate_offset(dim: int, k_s: int, n: float) -> float:
    if k_s == dim:
        return 0.0
    return -0.5 * (dim - k_s) * math.log(2.0 * math.pi * math.e / n)


def _check_degenerate(dim, k_s, v, target):
    v = np.asarray(v, dtype=float).ravel()
    if not 1 <= k_s <= dim or v.size != k_s:
        raise ValueError(f"need 1 <= K_S <= D and {k_s} variances, got K_S={k_s}, D={dim}, {v.size} variances")
    if not np.all(v > 0):
        raise ValueError("subspace variances must be positive")
    if target.dim != dim:
        raise ValueError(f"target has dimension {target.dim}, expected {dim}")
    return v


def gaussian_kl(cov_q: np.ndarray, target: SpdMatrix) -> float:
    """KL(N(0, diag(cov_q)) || N(0, Sigma)) for a diagonal first argument."""
    cov_q = np.asarray(cov_q, dtype=float)
    d = cov_q.size
    return 0.5 * (float(np.dot(np.diag(target.inverse), cov_q)) - d + target.logdet - float(np.sum(np.log(cov_q))))


def degenerate_gaussian_gap(
    dim: int,
    k_s: int,
    v: Sequence[float],
    target: SpdMatrix,
    ns: Sequence[float] = (1e1, 1e2, 1e3, 1e4),
) -> list[LimitRecord]:
    """Closed-form gaps for Q = N(0, diag(v, 0, ..., 0)) convolved with N(0, I/n)."""
    v = _check_degenerate(dim, k_s, v, target)
    ns = _check_increasing(ns)
    out = []
    for n in ns:
        cov = np.full(dim, 1.0 / n)
        cov[:k_s] += v
        out.append(LimitRecord.from_kl(n, gaussian_kl(cov, target), degenerate_offset(dim, k_s, n)))
    return out


def degenerate_gaussian_limit(dim: int, k_s: int, v: Sequence[float], target: SpdMatrix) -> float:
    """E_Q[log q - log p] with q the density of Q on its subspace and p the full target density."""
    v = _check_degenerate(dim, k_s, v, target)
    neg_entropy = -0.5 * float(np.sum(np.log(2.0 * math.pi * math.e * v)))
    cross = 0.5 * (dim * LOG_2PI + target.logdet + float(np.dot(np.diag(target.inverse)[:k_s], v)))
    return neg_entropy + cross
