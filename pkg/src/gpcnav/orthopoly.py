"""Orthogonal polynomials, Lagrange interpolation, Gaussian quadrature and
total-degree multivariate bases."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import mpmath
import numpy as np
from numpy.polynomial import Polynomial

from .distributions import (
    MOMENT_DPS,
    JointDistribution,
    Marginal,
    Normal,
    TruncatedNormal,
    Uniform,
    mp_moments,
)

MAX_DEGREE = 32
MAX_TENSOR_NODES = 10**6


class BasisOrderError(ArithmeticError):
    """The measure cannot support a recurrence of the requested order."""


class QuadratureError(ArithmeticError):
    pass


def lagrange_basis(points) -> list[Polynomial]:
    """Lagrange basis polynomials through ``points`` (ascending coefficients)."""
    x = np.asarray(points, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    if np.unique(x).size != x.size:
        raise ValueError("interpolation points must be distinct")
    basis = []
    for i, xi in enumerate(x):
        p = Polynomial([1.0])
        for j, xj in enumerate(x):
            if j != i:
                p = p * Polynomial([-xj, 1.0]) / (xi - xj)
        basis.append(p)
    return basis


@dataclass(frozen=True)
class Recurrence:
    """Monic three-term recurrence ``P_{k+1} = (x - alpha_k) P_k - beta_k P_{k-1}``.

    ``beta[0]`` is the total mass (1 for probability measures).
    """

    alpha: np.ndarray
    beta: np.ndarray

    def __len__(self) -> int:
        return len(self.alpha)


def _chebyshev_mp(moments, n: int) -> tuple[list, list]:
    """Chebyshev algorithm on ordinary moments ``mu_0..mu_{2n-1}``."""
    sig_prev = [mpmath.mpf(0)] * (2 * n)
    sig = list(moments[: 2 * n])
    alpha = [sig[1] / sig[0]]
    beta = [sig[0]]
    for k in range(1, n):
        new = [mpmath.mpf(0)] * (2 * n)
        for l in range(k, 2 * n - k):
            new[l] = sig[l + 1] - alpha[k - 1] * sig[l] - beta[k - 1] * sig_prev[l]
        if not new[k] > 0:
            raise BasisOrderError(f"basis order too high for this measure (step {k})")
        alpha.append(new[k + 1] / new[k] - sig[k] / sig[k - 1])
        beta.append(new[k] / sig[k - 1])
        sig_prev, sig = sig, new
    return alpha, beta


@lru_cache(maxsize=256)
def _recurrence_cached(m: Marginal, n: int) -> Recurrence:
    k = np.arange(n, dtype=float)
    if isinstance(m, Normal):
        alpha = np.full(n, float(m.mu))
        beta = k * m.sigma**2
        beta[0] = 1.0
        return Recurrence(alpha, beta)
    if isinstance(m, Uniform):
        half = 0.5 * (m.hi - m.lo)
        alpha = np.full(n, 0.5 * (m.lo + m.hi))
        with np.errstate(invalid="ignore"):
            beta = half**2 * k**2 / (4 * k**2 - 1)
        beta[0] = 1.0
        return Recurrence(alpha, beta)
    if isinstance(m, TruncatedNormal):
        # standardize, run the moment recurrence in extended precision, map back
        a = (m.lo - m.mu) / m.sigma
        b = (m.hi - m.mu) / m.sigma
        std = TruncatedNormal(0.0, 1.0, a, b)
        with mpmath.workdps(MOMENT_DPS):
            mom = mp_moments(std, 2 * n - 1)
            al, be = _chebyshev_mp(mom, n)
            scale = be[1] if n > 1 else mpmath.mpf(1)
            for j in range(1, n):
                if be[j] <= mpmath.mpf("1e-12") * scale:
                    raise BasisOrderError(f"basis order too high for this measure (beta_{j} = {be[j]})")
            alpha = np.array([m.mu + m.sigma * float(v) for v in al])
            beta = np.array([1.0] + [m.sigma**2 * float(v) for v in be[1:]])
        return Recurrence(alpha, beta)
    raise TypeError(f"unsupported marginal {m!r}")


def stieltjes_recurrence(m: Marginal, N: int) -> Recurrence:
    """Coefficients ``alpha_0..alpha_{N-1}``, ``beta_0..beta_{N-1}``; these define
    the monic orthogonal polynomials of degrees ``0..N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > MAX_DEGREE:
        raise BasisOrderError(f"order {N} exceeds degree cap {MAX_DEGREE}")
    return _recurrence_cached(m, N)


def eval_recurrence(rec: Recurrence, x, degree: int) -> np.ndarray:
    """Values of ``P_0..P_degree`` at ``x``; shape ``x.shape + (degree + 1,)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = x - rec.alpha[0]
    for k in range(1, degree):
        out[..., k + 1] = (x - rec.alpha[k]) * out[..., k] - rec.beta[k] * out[..., k - 1]
    return out


def _eval_with_derivative(rec: Recurrence, x: float, degree: int) -> tuple[float, float]:
    p_prev, p = 0.0, 1.0
    d_prev, d = 0.0, 0.0
    for k in range(degree):
        b = rec.beta[k] if k > 0 else 0.0
        p_new = (x - rec.alpha[k]) * p - b * p_prev
        d_new = p + (x - rec.alpha[k]) * d - b * d_prev
        p_prev, p = p, p_new
        d_prev, d = d, d_new
    return p, d


def _bracketed_root(rec: Recurrence, degree: int, lo: float, hi: float) -> float:
    f_lo = _eval_with_derivative(rec, lo, degree)[0]
    f_hi = _eval_with_derivative(rec, hi, degree)[0]
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        raise QuadratureError(
            f"no sign change for degree {degree} on [{lo!r}, {hi!r}]: f={f_lo!r}, {f_hi!r}"
        )
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f, df = _eval_with_derivative(rec, x, degree)
        if f == 0.0:
            return x
        if (f < 0) == (f_lo < 0):
            lo = x
        else:
            hi = x
        step = f / df if df != 0 else math.inf
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 4 * np.finfo(float).eps * max(abs(x), 1e-300) or hi - lo <= 4 * np.finfo(float).eps * max(abs(lo), abs(hi)):
            return x_new
        x = x_new
    raise QuadratureError(f"Newton iteration did not converge for degree {degree} in [{lo!r}, {hi!r}], last x={x!r}")


def recurrence_roots(rec: Recurrence, N: int) -> np.ndarray:
    """Roots of ``P_N`` found level by level: each root of ``P_k`` is bracketed by
    consecutive roots of ``P_{k-1}`` (interlacing)."""
    sq = np.sqrt(np.maximum(rec.beta[:N], 0.0))
    sq[0] = 0.0
    up = np.append(sq[1:N], 0.0)
    lo_bound = float(np.min(rec.alpha[:N] - sq - up))
    hi_bound = float(np.max(rec.alpha[:N] + sq + up))
    pad = 1e-12 * max(1.0, abs(lo_bound), abs(hi_bound))
    lo_bound -= pad
    hi_bound += pad
    roots = np.array([rec.alpha[0]])
    for k in range(2, N + 1):
        edges = np.concatenate([[lo_bound], roots, [hi_bound]])
        roots = np.array([_bracketed_root(rec, k, edges[i], edges[i + 1]) for i in range(k)])
    return roots


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        if self.nodes.shape[0] != self.weights.shape[0]:
            raise ValueError("nodes and weights differ in length")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def __len__(self) -> int:
        return self.weights.shape[0]

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum along the node axis, accumulated in node order."""
        values = np.asarray(values, dtype=float)
        acc = np.zeros(values.shape[1:])
        for q in range(len(self)):
            acc = acc + self.weights[q] * values[q]
        return acc


def gauss_quadrature(m: Marginal, N: int) -> QuadratureRule:
    """N-point Gauss rule for ``m``: nodes are the roots of ``P_N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    rec = stieltjes_recurrence(m, N)
    x = recurrence_roots(rec, N) if N > 1 else np.array([rec.alpha[0]])
    # Christoffel numbers; equal to the integrals of the Lagrange basis at Gauss nodes
    vals = eval_recurrence(rec, x, N - 1)
    norms = np.cumprod(rec.beta[:N])
    w = 1.0 / np.sum(vals**2 / norms, axis=1)
    w = w / np.sum(w)
    lo, hi = m.support
    if np.any(x <= lo) or np.any(x >= hi):
        raise QuadratureError(f"quadrature nodes escaped the support of {m!r}: {x}")
    return QuadratureRule(x.reshape(-1, 1), w)


def lagrange_weights(m: Marginal, nodes) -> np.ndarray:
    """Weights ``w_i = E[L_i(X)]`` from the Lagrange basis through ``nodes`` and the
    raw moments of ``m``; well conditioned only for small node counts."""
    nodes = np.asarray(nodes, dtype=float).ravel()
    basis = lagrange_basis(nodes)
    with mpmath.workdps(MOMENT_DPS):
        mom = [float(v) for v in mp_moments(m, nodes.size)]
    return np.array([sum(c * mom[k] for k, c in enumerate(L.coef)) for L in basis])


@dataclass(frozen=True)
class OrthoBasis:
    marginal: Marginal
    order: int
    recurrence: Recurrence
    polys: tuple
    norms_sq: np.ndarray

    def eval(self, x) -> np.ndarray:
        return eval_recurrence(self.recurrence, x, self.order)


def ortho_basis(m: Marginal, N: int) -> OrthoBasis:
    if N >= MAX_DEGREE:
        raise BasisOrderError(f"basis order {N} needs a recurrence beyond the degree cap {MAX_DEGREE}")
    rec = stieltjes_recurrence(m, N + 1)
    polys = [Polynomial([1.0])]
    if N >= 1:
        polys.append(Polynomial([-rec.alpha[0], 1.0]))
    for k in range(1, N):
        polys.append(Polynomial([-rec.alpha[k], 1.0]) * polys[k] - rec.beta[k] * polys[k - 1])
    norms = np.cumprod(rec.beta[: N + 1])
    return OrthoBasis(m, N, Recurrence(rec.alpha[:N], rec.beta[: N + 1]), tuple(polys), norms)


def total_degree_indices(d: int, N: int) -> np.ndarray:
    """Multi-indices with sum <= N, ordered by total degree then descending lex."""
    rows = []
    for total in range(N + 1):
        level = [c for c in itertools.product(range(total, -1, -1), repeat=d) if sum(c) == total]
        rows.extend(sorted(level, reverse=True))
    return np.array(rows, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True)
class MultiIndexBasis:
    joint: JointDistribution
    order: int
    indices: np.ndarray  # (P, d)
    factors: tuple
    norms_sq: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    def eval(self, X) -> np.ndarray:
        """Basis values at the rows of ``X``: shape ``(n, P)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {X.shape[1]}")
        out = np.ones((X.shape[0], len(self)))
        for k, fac in enumerate(self.factors):
            vals = fac.eval(X[:, k])
            out *= vals[:, self.indices[:, k]]
        return out

    def interaction_count(self) -> int:
        return int(np.sum(np.count_nonzero(self.indices, axis=1) >= 2))


def tensor_basis(j: JointDistribution, N: int) -> MultiIndexBasis:
    factors = tuple(ortho_basis(m, N) for m in j.marginals)
    idx = total_degree_indices(j.dim, N)
    norms = np.ones(idx.shape[0])
    for k, fac in enumerate(factors):
        norms = norms * fac.norms_sq[idx[:, k]]
    return MultiIndexBasis(j, N, idx, factors, norms)


def eval_multi(basis: MultiIndexBasis, idx, x) -> float:
    idx = tuple(int(i) for i in idx)
    if idx not in {tuple(r) for r in basis.indices.tolist()}:
        raise KeyError(f"multi-index {idx} not in basis")
    val = 1.0
    for k, fac in enumerate(basis.factors):
        val *= float(fac.eval(float(x[k]))[idx[k]])
    return val


def tensor_quadrature(j: JointDistribution, N: int, cap: int = MAX_TENSOR_NODES) -> QuadratureRule:
    """Full tensor grid of ``N``-point Gauss rules; the last dimension varies fastest."""
    if N**j.dim > cap:
        raise QuadratureError(f"{N}^{j.dim} = {N ** j.dim} nodes exceeds the cap of {cap}")
    rules = [gauss_quadrature(m, N) for m in j.marginals]
    grids = np.meshgrid(*[r.nodes[:, 0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    w = np.ones(nodes.shape[0])
    for g in wgrids:
        w = w * g.ravel()
    return QuadratureRule(nodes, w)
