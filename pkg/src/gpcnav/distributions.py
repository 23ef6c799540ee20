"""Independent marginals used as GPC weight measures and simulation inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Union

import mpmath
import numpy as np
from scipy.special import ndtr, ndtri

from .rng import CounterRNG

MAX_MOMENT_ORDER = 64
# working precision for moment evaluation; moments feed the recurrence
# construction where cancellation grows with order
MOMENT_DPS = 80


class MomentUnavailableError(ArithmeticError):
    """Raised when a raw moment cannot be represented in double precision."""


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0

    kind = "normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise DistributionError(f"sigma must be > 0, got {self.sigma}")

    @property
    def support(self) -> tuple[float, float]:
        return (-math.inf, math.inf)

    def pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def ppf(self, u):
        return self.mu + self.sigma * ndtri(u)

    def mean(self) -> float:
        return self.mu

    def var(self) -> float:
        return self.sigma**2

    def _mp_moments(self, kmax: int) -> list:
        # E[Z^k] = (k-1)!! for even k
        mu, s = mpmath.mpf(self.mu), mpmath.mpf(self.sigma)
        z = [mpmath.mpf(1), mpmath.mpf(0)]
        for k in range(2, kmax + 1):
            z.append((k - 1) * z[k - 2])
        return _affine_moments(z, mu, s, kmax)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class TruncatedNormal:
    mu: float
    sigma: float
    lo: float
    hi: float

    kind = "truncated_normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise DistributionError(f"sigma must be > 0, got {self.sigma}")
        if not self.lo < self.hi:
            raise DistributionError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if not self._mass() > 0:
            raise DistributionError("truncation interval carries no probability mass")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    @property
    def _ab(self) -> tuple[float, float]:
        return ((self.lo - self.mu) / self.sigma, (self.hi - self.mu) / self.sigma)

    def _mass(self) -> float:
        a, b = self._ab
        if a > 0:
            return float(ndtr(-a) - ndtr(-b))
        return float(ndtr(b) - ndtr(a))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        p = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self._mass())
        return np.where((x >= self.lo) & (x <= self.hi), p, 0.0)

    def ppf(self, u):
        a, b = self._ab
        u = np.asarray(u, dtype=float)
        if a > 0:
            # invert in the upper tail to keep precision
            qa, qb = ndtr(-a), ndtr(-b)
            z = -ndtri(qa - u * (qa - qb))
        else:
            pa, pb = ndtr(a), ndtr(b)
            z = ndtri(pa + u * (pb - pa))
        return np.clip(self.mu + self.sigma * z, self.lo, self.hi)

    def mean(self) -> float:
        return float(self._mp_moments(1)[1])

    def var(self) -> float:
        m = self._mp_moments(2)
        return float(m[2] - m[1] ** 2)

    def _mp_moments(self, kmax: int) -> list:
        # standardized truncated moments:
        #   M_k = (k-1) M_{k-2} + (a^{k-1} phi(a) - b^{k-1} phi(b)) / Z
        with mpmath.workdps(MOMENT_DPS):
            mu, s = mpmath.mpf(self.mu), mpmath.mpf(self.sigma)
            a = (mpmath.mpf(self.lo) - mu) / s
            b = (mpmath.mpf(self.hi) - mu) / s
            phi = lambda t: mpmath.npdf(t) if mpmath.isfinite(t) else mpmath.mpf(0)
            Z = mpmath.ncdf(b) - mpmath.ncdf(a)
            pa, pb = phi(a), phi(b)

            def edge(t, p, j):
                if p == 0:
                    return mpmath.mpf(0)
                return t**j * p

            m = [mpmath.mpf(1), (pa - pb) / Z]
            for k in range(2, kmax + 1):
                m.append((k - 1) * m[k - 2] + (edge(a, pa, k - 1) - edge(b, pb, k - 1)) / Z)
            return _affine_moments(m, mu, s, kmax)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mu": self.mu, "sigma": self.sigma, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    kind = "uniform"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DistributionError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def ppf(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u, dtype=float)

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def var(self) -> float:
        return (self.hi - self.lo) ** 2 / 12.0

    def _mp_moments(self, kmax: int) -> list:
        lo, hi = mpmath.mpf(self.lo), mpmath.mpf(self.hi)
        return [(hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * (hi - lo)) for k in range(kmax + 1)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


Marginal = Union[Normal, TruncatedNormal, Uniform]


def _affine_moments(zm: list, mu, s, kmax: int) -> list:
    # E[(mu + s Z)^k] from the moments of Z
    out = []
    for k in range(kmax + 1):
        acc = mpmath.mpf(0)
        for j in range(k + 1):
            acc += mpmath.binomial(k, j) * mu ** (k - j) * s**j * zm[j]
        out.append(acc)
    return out


@lru_cache(maxsize=256)
def mp_moments(m: Marginal, kmax: int) -> tuple:
    """Raw moments ``E[X^0..X^kmax]`` as mpmath numbers at ``MOMENT_DPS`` digits."""
    if kmax > MAX_MOMENT_ORDER:
        raise MomentUnavailableError(f"moment order {kmax} exceeds cap {MAX_MOMENT_ORDER}")
    with mpmath.workdps(MOMENT_DPS):
        return tuple(m._mp_moments(kmax))


def raw_moment(m: Marginal, k: int) -> float:
    """``E[X^k]`` in double precision."""
    if k < 0:
        raise ValueError("moment order must be non-negative")
    if k > MAX_MOMENT_ORDER:
        raise MomentUnavailableError(f"moment order {k} exceeds cap {MAX_MOMENT_ORDER}")
    with mpmath.workdps(MOMENT_DPS):
        value = mp_moments(m, k)[k]
        try:
            out = float(value)
        except OverflowError:
            out = math.inf
    if not math.isfinite(out):
        raise MomentUnavailableError(f"moment E[X^{k}] of {m} is not representable in float64")
    return out


@dataclass(frozen=True)
class JointDistribution:
    """Product measure of independent marginals."""

    marginals: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise DistributionError("joint distribution needs at least one marginal")

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def __len__(self) -> int:
        return self.dim

    def __getitem__(self, i) -> Marginal:
        return self.marginals[i]

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms of shape ``(n, dim)`` through each marginal's inverse CDF."""
        u = np.atleast_2d(u)
        return np.column_stack([m.ppf(u[:, i]) for i, m in enumerate(self.marginals)])

    def sample(self, rng: CounterRNG, n: int, *, stream: int = 0, step: int = 0,
               index: np.ndarray | None = None) -> np.ndarray:
        return sample(self, rng, n, stream=stream, step=step, index=index)

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.marginals]


def join(*parts: Iterable) -> JointDistribution:
    """Concatenate marginals and joint distributions, preserving order."""
    if not parts:
        raise DistributionError("join needs at least one part")
    out: list = []
    for p in parts:
        if isinstance(p, JointDistribution):
            out.extend(p.marginals)
        elif isinstance(p, (list, tuple)):
            out.extend(join(*p).marginals if p else ())
        else:
            out.append(p)
    return JointDistribution(tuple(out))


def sample(j: JointDistribution, rng: CounterRNG, n: int, *, stream: int = 0, step: int = 0,
           index: np.ndarray | None = None) -> np.ndarray:
    """``n`` draws of ``j``; row ``i`` depends only on ``(seed, stream, step, index[i])``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if index is None:
        index = np.arange(n, dtype=np.uint64)
    u = rng.uniform(stream, step, index, j.dim)
    return j.ppf(u)


_KINDS = {"normal": Normal, "truncated_normal": TruncatedNormal, "uniform": Uniform}


def marginal_from_dict(d: dict) -> Marginal:
    """Build a marginal from a tagged record such as ``{"kind": "uniform", "lo": 0, "hi": 1}``."""
    try:
        cls = _KINDS[d["kind"]]
    except KeyError:
        raise DistributionError(f"unknown or missing marginal kind in {d!r}") from None
    fields = {k: float(v) for k, v in d.items() if k != "kind"}
    try:
        return cls(**fields)
    except TypeError as exc:
        raise DistributionError(f"bad parameters for {d['kind']}: {exc}") from None


def joint_from_list(items: list) -> JointDistribution | None:
    if not items:
        return None
    return JointDistribution(tuple(marginal_from_dict(d) for d in items))


def std_normals(k: int) -> tuple:
    return tuple(Normal(0.0, 1.0) for _ in range(k))
