"""Synthetic perception oracle and the regression-based perception model.

The oracle stands in for image capture plus a perception network: at a true
state ``s`` it returns ``s + bias(s) + chol(cov(s)) @ e`` for an environment
draw ``e``, so its output distribution at every state is Gaussian.  The
perception model is fit from grid samples of the oracle and predicts the
mean and covariance of the perceived state.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .orthopoly import total_degree_indices
from .rng import STREAM_ENV, STREAM_FOLDS, CounterRNG

RHO_CLAMP = 0.999
VAR_FLOOR = 1e-12


class RegressionError(np.linalg.LinAlgError):
    """Raised for rank-deficient regression designs."""


# ---------------------------------------------------------------------------
# polynomial regression


@dataclass
class PolyRegression:
    """Least-squares fit on total-degree monomials of ``(x - center) / scale``."""

    degree: int
    exponents: np.ndarray  # (F, d)
    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray  # (F, targets)

    def features(self, X) -> np.ndarray:
        return monomial_features(X, self.exponents, self.center, self.scale)

    def predict(self, X) -> np.ndarray:
        Phi = self.features(X)
        out = np.zeros((Phi.shape[0], self.coef.shape[1]))
        for f in range(Phi.shape[1]):
            out += Phi[:, f : f + 1] * self.coef[f]
        return out

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "exponents": self.exponents.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "coef": self.coef.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolyRegression":
        return cls(int(d["degree"]), np.array(d["exponents"], dtype=np.int64), np.array(d["center"], dtype=float),
                   np.array(d["scale"], dtype=float), np.array(d["coef"], dtype=float))


def monomial_features(X, exponents, center=None, scale=None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if center is not None:
        X = (X - center) / scale
    top = int(exponents.max()) if exponents.size else 0
    powers = [np.ones_like(X)]
    for _ in range(top):
        powers.append(powers[-1] * X)
    out = np.ones((X.shape[0], exponents.shape[0]))
    for k in range(X.shape[1]):
        for f in range(exponents.shape[0]):
            e = exponents[f, k]
            if e:
                out[:, f] *= powers[e][:, k]
    return out


def polyreg_fit(X, Y, degree: int, center=None, scale=None) -> PolyRegression:
    """Fit ``Y`` (rows) on total-degree monomials of ``X`` up to ``degree``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    d = X.shape[1]
    center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    exps = total_degree_indices(d, degree)
    if X.shape[0] < exps.shape[0]:
        raise RegressionError(f"{X.shape[0]} points cannot determine {exps.shape[0]} coefficients (degree {degree})")
    Phi = monomial_features(X, exps, center, scale)
    coef, _, rank, _ = np.linalg.lstsq(Phi, Y, rcond=None)
    if rank < Phi.shape[1]:
        raise RegressionError(f"rank-deficient design: rank {rank} < {Phi.shape[1]} (degree {degree})")
    return PolyRegression(degree, exps, center, scale, coef)


# ---------------------------------------------------------------------------
# oracle


@dataclass
class PerceptionOracle:
    """Gaussian perception oracle.

    ``bias_terms`` is a list of ``(output, powers, coef)`` monomials; the
    per-output standard deviation is ``std * (1 + std_growth * sum((s/scale)^2))``
    and the pairwise correlation ``rho + rho_slope * tanh(s_0 / scale_0)``.
    """

    dim: int
    scale: np.ndarray
    bias_terms: list = field(default_factory=list)
    std: np.ndarray = None
    std_growth: np.ndarray = None
    rho: float = 0.0
    rho_slope: float = 0.0

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float)
        self.std = np.zeros(self.dim) if self.std is None else np.asarray(self.std, dtype=float)
        self.std_growth = np.zeros(self.dim) if self.std_growth is None else np.asarray(self.std_growth, dtype=float)
        if abs(self.rho) + abs(self.rho_slope) >= 1:
            raise ValueError("oracle correlation must stay inside (-1, 1)")
        if np.any(self.std < 0):
            raise ValueError("oracle standard deviations must be non-negative")

    @property
    def env_dim(self) -> int:
        return self.dim

    def bias(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        out = np.zeros_like(S)
        for o, powers, c in self.bias_terms:
            term = np.full(S.shape[0], float(c))
            for k, p in enumerate(powers):
                if p:
                    term = term * S[:, k] ** p
            out[:, o] += term
        return out

    def mean(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return S + self.bias(S)

    def stds(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        r2 = np.sum((S / self.scale) ** 2, axis=1, keepdims=True)
        return self.std * (1.0 + self.std_growth * r2)

    def corr(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return self.rho + self.rho_slope * np.tanh(S[:, 0] / self.scale[0])

    def cov(self, S) -> np.ndarray:
        sd = self.stds(S)
        r = self.corr(S)
        n = sd.shape[0]
        C = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                C[:, i, j] = sd[:, i] * sd[:, j] * (1.0 if i == j else r)
        return C

    def perceive(self, S, E) -> np.ndarray:
        from .vehicle import transform

        return transform(E, self.mean(S), self.cov(S))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "scale": self.scale.tolist(),
            "bias_terms": [[o, list(p), c] for o, p, c in self.bias_terms],
            "std": self.std.tolist(),
            "std_growth": self.std_growth.tolist(),
            "rho": self.rho,
            "rho_slope": self.rho_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptionOracle":
        return cls(int(d["dim"]), d["scale"], [(int(o), tuple(p), float(c)) for o, p, c in d.get("bias_terms", [])],
                   d.get("std"), d.get("std_growth"), float(d.get("rho", 0.0)), float(d.get("rho_slope", 0.0)))


def oracle_perceive(o: PerceptionOracle, s, e) -> np.ndarray:
    return o.perceive(s, e)


# ---------------------------------------------------------------------------
# training grid and model


@dataclass(frozen=True)
class GroundTruthGrid:
    lo: tuple
    hi: tuple
    levels: tuple

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.levels)):
            raise ValueError("grid bounds and levels must have equal length")
        if any(n < 2 for n in self.levels):
            raise ValueError("each grid dimension needs at least 2 levels")

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.levels)]

    @property
    def points(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.axes)), dtype=float)

    def offset(self) -> np.ndarray:
        """Cell centres: the grid shifted by half a cell, one fewer level per axis."""
        axes = [0.5 * (ax[1:] + ax[:-1]) for ax in self.axes]
        return np.array(list(itertools.product(*axes)), dtype=float)

    def __len__(self) -> int:
        return int(np.prod(self.levels))


def _cov_targets(C: np.ndarray) -> np.ndarray:
    """Variances followed by upper-triangle correlations."""
    k = C.shape[-1]
    var = np.stack([C[..., i, i] for i in range(k)], axis=-1)
    cols = [var]
    for i, j in itertools.combinations(range(k), 2):
        denom = np.sqrt(np.maximum(var[..., i] * var[..., j], 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(denom > 0, C[..., i, j] / np.where(denom > 0, denom, 1.0), 0.0)
        cols.append(r[..., None])
    return np.concatenate(cols, axis=-1)


def _cov_from_targets(T: np.ndarray, k: int) -> np.ndarray:
    var = np.maximum(T[:, :k], VAR_FLOOR)
    sd = np.sqrt(var)
    n = T.shape[0]
    C = np.empty((n, k, k))
    for i in range(k):
        C[:, i, i] = var[:, i]
    for col, (i, j) in enumerate(itertools.combinations(range(k), 2)):
        r = np.clip(T[:, k + col], -RHO_CLAMP, RHO_CLAMP)
        C[:, i, j] = C[:, j, i] = r * sd[:, i] * sd[:, j]
    if k > 2:
        # correlations clamped one at a time need not form a PSD matrix
        w, V = np.linalg.eigh(C)
        w = np.maximum(w, VAR_FLOOR)
        C = np.einsum("nij,nj,nkj->nik", V, w, V)
    return C


@dataclass
class PerceptionModel:
    mean_reg: PolyRegression
    cov_reg: PolyRegression
    dim: int
    safe_lo: np.ndarray
    safe_hi: np.ndarray
    summary: dict = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return self.mean_reg.degree

    def predict(self, S, return_flags: bool = False):
        """Predicted perceived-state mean ``(n, k)`` and covariance ``(n, k, k)``."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        mu = self.mean_reg.predict(S)
        cov = _cov_from_targets(self.cov_reg.predict(S), self.dim)
        if return_flags:
            outside = np.any((S < self.safe_lo) | (S > self.safe_hi), axis=1)
            return mu, cov, outside
        return mu, cov

    def to_dict(self) -> dict:
        return {
            "format": "gpcnav.perception",
            "version": 1,
            "dim": self.dim,
            "degree": self.degree,
            "safe_lo": self.safe_lo.tolist(),
            "safe_hi": self.safe_hi.tolist(),
            "mean_regression": self.mean_reg.to_dict(),
            "cov_regression": self.cov_reg.to_dict(),
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptionModel":
        if d.get("format") != "gpcnav.perception":
            raise ValueError("not a serialized perception model")
        return cls(PolyRegression.from_dict(d["mean_regression"]), PolyRegression.from_dict(d["cov_regression"]),
                   int(d["dim"]), np.array(d["safe_lo"], dtype=float), np.array(d["safe_hi"], dtype=float),
                   d.get("summary", {}))

    def training_csv(self) -> str:
        """CSV of per-grid-point training targets."""
        s = self.summary
        k = self.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = [f"s{i}" for i in range(k)] + [f"mu{i}" for i in range(k)]
        head += [f"cov{i}{j}" for i in range(k) for j in range(i, k)] + ["count"]
        w.writerow(head)
        for g, mu, C in zip(s["points"], s["mu"], s["cov"]):
            row = [repr(float(v)) for v in g] + [repr(float(v)) for v in mu]
            row += [repr(float(C[i][j])) for i in range(k) for j in range(i, k)] + [s["count"]]
            w.writerow(row)
        return buf.getvalue()


def _normalized_rmse(pred: np.ndarray, truth: np.ndarray, scale: np.ndarray) -> float:
    rmse = np.sqrt(np.mean((pred - truth) ** 2, axis=0))
    return float(np.mean(rmse / scale))


def _target_scale(Y: np.ndarray) -> np.ndarray:
    s = np.std(Y, axis=0)
    return np.where(s > 1e-15, s, 1.0)


def collect_training_data(grid: GroundTruthGrid, oracle: PerceptionOracle, N_i: int, rng: CounterRNG,
                          threads: int = 1) -> dict:
    """Oracle outputs at each grid point: mean, covariance and a normality check."""
    if N_i < 2:
        raise ValueError("N_i must be >= 2")
    pts = grid.points
    k = oracle.dim

    def one(gi: int):
        E = rng.normal(STREAM_ENV, gi, np.arange(N_i), oracle.env_dim)
        O = oracle.perceive(np.repeat(pts[gi : gi + 1], N_i, axis=0), E)
        mu = O.mean(axis=0)
        C = np.cov(O, rowvar=False, ddof=1).reshape(k, k)
        pvals = []
        for c in range(k):
            col = O[:, c]
            if N_i >= 3 and np.ptp(col) > 0:
                pvals.append(float(stats.shapiro(col).pvalue))
            else:
                pvals.append(1.0)
        return mu, C, min(pvals)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(one, range(len(pts))))
    else:
        res = [one(i) for i in range(len(pts))]
    return {
        "points": pts,
        "mu": np.array([r[0] for r in res]),
        "cov": np.array([r[1] for r in res]),
        "normality_p": np.array([r[2] for r in res]),
    }


def _fold_ids(n: int, folds: int, rng: CounterRNG) -> np.ndarray:
    u = rng.uniform(STREAM_FOLDS, 0, np.arange(n), 1)[:, 0]
    order = np.argsort(u, kind="stable")
    ids = np.empty(n, dtype=int)
    ids[order] = np.arange(n) % folds
    return ids


def select_degree(X, Y, degrees, folds: int, rng: CounterRNG, center, scale) -> tuple[int, dict]:
    """k-fold cross-validated degree choice; ties go to the lower degree."""
    ids = _fold_ids(X.shape[0], folds, rng)
    ys = _target_scale(Y)
    scores = {}
    for deg in degrees:
        errs = []
        try:
            for f in range(folds):
                tr, te = ids != f, ids == f
                reg = polyreg_fit(X[tr], Y[tr], deg, center, scale)
                errs.append(_normalized_rmse(reg.predict(X[te]), Y[te], ys))
        except RegressionError:
            scores[deg] = math.inf
            continue
        scores[deg] = float(np.mean(errs))
    best = min(scores.values())
    if not math.isfinite(best):
        raise RegressionError("no candidate degree admits a full-rank design on this grid")
    chosen = min(d for d, s in scores.items() if s <= best * (1 + 1e-9) + 1e-300)
    return chosen, scores


def train_perception_model(grid: GroundTruthGrid, oracle: PerceptionOracle, N_i: int, rng: CounterRNG, *,
                           degree: int | None = None, degrees=range(1, 7), folds: int = 5,
                           normality_alpha: float = 0.01, threads: int = 1) -> PerceptionModel:
    """Sample the oracle on ``grid`` and regress mean and covariance on state.

    With ``degree=None`` the regression degree is chosen by cross-validation
    over ``degrees``.
    """
    data = collect_training_data(grid, oracle, N_i, rng, threads)
    X = data["points"]
    lo, hi = np.array(grid.lo, dtype=float), np.array(grid.hi, dtype=float)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    Ym = data["mu"]
    Yc = _cov_targets(data["cov"])
    Y = np.hstack([Ym, Yc])
    cv_scores = {}
    if degree is None:
        degree, cv_scores = select_degree(X, Y, list(degrees), folds, rng, center, half)
    mean_reg = polyreg_fit(X, Ym, degree, center, half)
    cov_reg = polyreg_fit(X, Yc, degree, center, half)
    fails = data["normality_p"] < normality_alpha
    summary = {
        "grid_levels": list(grid.levels),
        "samples_per_point": N_i,
        "count": N_i,
        "degree": degree,
        "cv_scores": {str(k): v for k, v in cv_scores.items()},
        "normality_alpha": normality_alpha,
        "normality_failure_fraction": float(np.mean(fails)),
        "points": X.tolist(),
        "mu": Ym.tolist(),
        "cov": data["cov"].tolist(),
    }
    return PerceptionModel(mean_reg, cov_reg, oracle.dim, lo, hi, summary)


def predict(m: PerceptionModel, s):
    return m.predict(s)


def heldout_rmse(m: PerceptionModel, oracle: PerceptionOracle, points) -> dict:
    """Prediction error against the oracle's exact mean and covariance."""
    pts = np.atleast_2d(points)
    mu, cov = m.predict(pts)
    true_mu, true_cov = oracle.mean(pts), oracle.cov(pts)
    mean_rmse = float(np.sqrt(np.mean(np.sum((mu - true_mu) ** 2, axis=1))))
    t_pred, t_true = _cov_targets(cov), _cov_targets(true_cov)
    cov_rmse = np.sqrt(np.mean((t_pred - t_true) ** 2, axis=0))
    return {"mean": mean_rmse, "cov_targets": cov_rmse.tolist(),
            "combined": _normalized_rmse(np.hstack([mu, t_pred]), np.hstack([true_mu, t_true]),
                                         _target_scale(np.hstack([true_mu, t_true])))}
