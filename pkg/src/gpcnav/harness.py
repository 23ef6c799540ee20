"""Surrogate construction, safe-probability propagation and GAS-vs-MCS comparison."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .distributions import JointDistribution, join, std_normals
from .gpc import GpcModel, MegpcModel, _chunks, evaluate, megpc_project, project
from .orthopoly import MAX_TENSOR_NODES, tensor_basis, tensor_quadrature
from .perception import PerceptionModel
from .rng import STREAM_BOOTSTRAP, STREAM_INIT, STREAM_NOISE, STREAM_OTHER, STREAM_SOBOL, CounterRNG
from .vehicle import train_ancillary_classifier, wrap_angle

MCS_STREAM_OFFSET = 16


class NodeBudgetError(ValueError):
    def __init__(self, dim: int, order: int, cap: int):
        nodes = (order + 1) ** dim
        lower = max(0, int(math.floor(cap ** (1.0 / dim) + 1e-9)) - 1)
        while (lower + 1) ** dim > cap and lower > 0:
            lower -= 1
        super().__init__(f"order {order} in {dim} dims needs {nodes} nodes > cap {cap}; "
                         f"try order {lower} or lower")
        self.suggested_order = lower


class PropagationError(ArithmeticError):
    def __init__(self, sample: int, step: int):
        super().__init__(f"non-finite model output for sample {sample} at step {step}")
        self.sample, self.step = sample, step


# ---------------------------------------------------------------------------
# surrogate construction


def _unwrap_target(S, S_next, wrap_dims):
    """Replace wrapped angle outputs by ``S + wrap(S' - S)`` so the projected
    function stays continuous; surrogates re-wrap after evaluation."""
    if not wrap_dims:
        return S_next
    out = np.array(S_next, dtype=float)
    for j in wrap_dims:
        out[:, j] = S[:, j] + wrap_angle(S_next[:, j] - S[:, j])
    return out


def create_gpc_model(state_dist: JointDistribution, other_dist: JointDistribution | None, order: int, step, *,
                     raw_dim: int = 0, categories=None, classifier=None, output_names=None,
                     max_nodes: int = MAX_TENSOR_NODES, threads: int = 1) -> GpcModel | MegpcModel:
    """Project a deterministic one-step model onto a total-degree basis.

    The input joint is ``state x N(0, I)^raw_dim x other``.  ``step(X)`` (or
    ``step(X, code)`` when ``categories`` is given) returns the next continuous
    state for rows of ``X``.
    """
    parts = [state_dist, std_normals(raw_dim)]
    if other_dist is not None:
        parts.append(other_dist)
    joint = join(*parts)
    if (order + 1) ** joint.dim > max_nodes:
        raise NodeBudgetError(joint.dim, order, max_nodes)
    basis = tensor_basis(joint, order)
    rule = tensor_quadrature(joint, order + 1, max_nodes)
    if categories is None:
        return project(step, basis, rule, output_names, threads)
    return megpc_project(step, categories, basis, rule, classifier, output_names, threads)


def scenario_step_function(scn, m_per: PerceptionModel | None):
    """Abstracted one-step model of ``scn`` as a function of joint inputs."""
    ds, nr = scn.state_dim, scn.raw_dim

    if scn.categorical:
        def f(X, code):
            S = X[:, :ds]
            return _unwrap_target(S, scn.acas.continuous(S, np.full(X.shape[0], code)), scn.wrap_dims)
        return f

    def f(X):
        S, N = X[:, :ds], X[:, ds : ds + nr]
        R = X[:, ds + nr :] if scn.other_dim else None
        return _unwrap_target(S, scn.abstracted_step(S, N, R, m_per), scn.wrap_dims)
    return f


def build_surrogate(scn, m_per: PerceptionModel | None, order: int, *, classifier_levels=None,
                    classifier_samples: int = 350, classifier_depth=None, max_nodes: int = MAX_TENSOR_NODES,
                    threads: int = 1):
    """Surrogate of the scenario's abstracted step (MEGPC for categorical scenarios)."""
    f = scenario_step_function(scn, m_per)
    clf = None
    if scn.categorical:
        ccfg = scn.params["classifier"]
        levels = classifier_levels or ccfg["levels"]
        pts = scn.classifier_grid(levels).points
        clf = train_ancillary_classifier(pts, len(scn.categories), lambda S, c, R: scn.acas.advisory(S, c),
                                         classifier_samples, None, classifier_depth)
    return create_gpc_model(scn.state_dist, scn.other_dist, order, f, raw_dim=scn.raw_dim,
                            categories=list(scn.categories) if scn.categorical else None, classifier=clf,
                            output_names=list(scn.state_names), max_nodes=max_nodes, threads=threads)


# ---------------------------------------------------------------------------
# step models consumed by the propagation loop


@dataclass
class SurrogateStep:
    """GAS step: the GPC (or MEGPC) surrogate with angle dimensions re-wrapped."""

    model: GpcModel | MegpcModel
    state_dim: int
    noise_dim: int
    wrap_dims: tuple = ()

    def __call__(self, S, codes, N, R):
        parts = [S] + ([N] if self.noise_dim else []) + ([R] if R is not None else [])
        X = np.hstack(parts)
        if isinstance(self.model, MegpcModel):
            out, nxt = self.model(X, codes)
        else:
            out, nxt = evaluate(self.model, X), codes
        for j in self.wrap_dims:
            out[:, j] = wrap_angle(out[:, j])
        return out, nxt


@dataclass
class OracleStep:
    """Baseline step: the true oracle-backed perception (or the exact advisory logic)."""

    scenario: object

    @property
    def noise_dim(self) -> int:
        o = self.scenario.oracle
        return o.env_dim if o is not None else 0

    def __call__(self, S, codes, N, R):
        scn = self.scenario
        if scn.categorical:
            return scn.acas(S, codes)
        return scn.true_step(S, N, R), codes


@dataclass
class AbstractedStep:
    """Perception model plus raw-sample transform (the function the surrogate approximates)."""

    scenario: object
    perception: PerceptionModel | None

    @property
    def noise_dim(self) -> int:
        return self.scenario.raw_dim

    def __call__(self, S, codes, N, R):
        scn = self.scenario
        if scn.categorical:
            return scn.acas(S, codes)
        return scn.abstracted_step(S, N, R, self.perception), codes


# ---------------------------------------------------------------------------
# propagation


@dataclass
class SimulationConfig:
    n_samples: int
    steps: int
    init_dist: JointDistribution
    safe: object
    seed: int = 0
    scenario: str = ""
    other_dist: JointDistribution | None = None
    initial_category: int | None = None
    stream_offset: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class TrajectoryEnsemble:
    n_samples: int
    initial: np.ndarray
    states: list  # states[t-1]: surviving states after step t
    ids: list  # original sample indices of the survivors
    survivors: np.ndarray  # (T,)
    p_safe: np.ndarray  # (T,)
    categories: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.p_safe)


def _apply(model, S, C, N, R, threads: int):
    n = S.shape[0]
    if threads <= 1 or n < 2:
        return model(S, C, N, R)

    def run(sl):
        return model(S[sl], None if C is None else C[sl], None if N is None else N[sl],
                     None if R is None else R[sl])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, _chunks(n, threads)))
    out = np.concatenate([p[0] for p in parts], axis=0)
    nxt = None if C is None else np.concatenate([p[1] for p in parts])
    return out, nxt


def estimate_safe_probability(cfg: SimulationConfig, model, threads: int = 1) -> TrajectoryEnsemble:
    """Propagate ``cfg.n_samples`` trajectories through ``model`` for ``cfg.steps`` steps.

    Unsafe samples are removed permanently; survivors get fresh noise and
    other-random draws every step.  Each draw is keyed by the sample's
    original index and the step, so results do not depend on ``threads``.
    """
    rng = CounterRNG(cfg.seed)
    off = cfg.stream_offset
    noise_dim = int(getattr(model, "noise_dim", 0))
    ids = np.arange(cfg.n_samples, dtype=np.uint64)
    S = cfg.init_dist.sample(rng, cfg.n_samples, stream=STREAM_INIT + off, index=ids)
    initial = S.copy()
    C = None if cfg.initial_category is None else np.full(cfg.n_samples, cfg.initial_category, dtype=int)
    states, keep_ids, cats = [], [], []
    survivors = np.zeros(cfg.steps, dtype=np.int64)
    for t in range(1, cfg.steps + 1):
        if S.shape[0]:
            N = rng.normal(STREAM_NOISE + off, t - 1, ids, noise_dim) if noise_dim else None
            R = (cfg.other_dist.sample(rng, S.shape[0], stream=STREAM_OTHER + off, step=t - 1, index=ids)
                 if cfg.other_dist is not None else None)
            S_next, C_next = _apply(model, S, C, N, R, threads)
            S_next = np.asarray(S_next, dtype=float)
            bad = ~np.all(np.isfinite(S_next), axis=1)
            if np.any(bad):
                raise PropagationError(int(ids[np.flatnonzero(bad)[0]]), t)
            ok = np.asarray(cfg.safe.contains(S_next), dtype=bool)
            S, ids = S_next[ok], ids[ok]
            C = None if C_next is None else np.asarray(C_next, dtype=int)[ok]
        survivors[t - 1] = S.shape[0]
        states.append(S.copy())
        keep_ids.append(ids.copy())
        cats.append(None if C is None else C.copy())
    return TrajectoryEnsemble(cfg.n_samples, initial, states, keep_ids, survivors,
                              survivors / float(cfg.n_samples), cats)


# ---------------------------------------------------------------------------
# metrics


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS needs nonempty samples")
    with np.errstate(divide="ignore", invalid="ignore"):  # only the statistic is used, not the p-value
        return float(stats.ks_2samp(a, b, method="asymp").statistic)


W1_QUANTILES = 1000


def wasserstein1(a, b) -> float:
    """1-D Wasserstein-1 distance.

    Equal sizes pair order statistics; otherwise both quantile functions are
    compared at ``W1_QUANTILES`` evenly spaced levels.
    """
    a, b = np.sort(np.asarray(a, dtype=float).ravel()), np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("Wasserstein needs nonempty samples")
    if a.size != b.size:
        q = (np.arange(W1_QUANTILES) + 0.5) / W1_QUANTILES
        a, b = np.quantile(a, q), np.quantile(b, q)
    return float(np.mean(np.abs(a - b)))


def two_sample_prop_test(k1: int, n1: int, k2: int, n2: int, alpha: float = 0.05) -> bool:
    """Unpooled two-proportion z test; ``True`` when equality is not rejected."""
    if n1 < 30 or n2 < 30:
        raise ValueError("sample sizes must be >= 30")
    p1, p2 = k1 / n1, k2 / n2
    se = math.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    if se == 0.0:
        return p1 == p2
    z = (p1 - p2) / se
    return bool(abs(z) < stats.norm.ppf(1 - alpha / 2))


def bootstrap_ci(k: int, n: int, level: float = 0.95, B: int = 1000, rng: CounterRNG | None = None,
                 step: int = 0, stream: int = STREAM_BOOTSTRAP) -> tuple[float, float]:
    """Percentile bootstrap interval for a proportion ``k / n``.

    Resampling ``n`` Bernoulli indicators with replacement gives a
    Binomial(n, k/n) count, drawn here by inverse CDF of counter-based uniforms.
    """
    if B < 100:
        raise ValueError("B must be >= 100")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng or CounterRNG(0)
    u = rng.uniform(stream, step, np.arange(B), 1)[:, 0]
    p = k / n
    props = stats.binom.ppf(u, n, p) / n
    lo, hi = np.quantile(props, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def series_similarity(p_gas, p_mcs) -> tuple[float, float, bool]:
    """RMS difference and Pearson correlation; third item flags an undefined correlation."""
    a, b = np.asarray(p_gas, dtype=float), np.asarray(p_mcs, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("series must have equal length >= 2")
    l2 = float(np.sqrt(np.mean((a - b) ** 2)))
    sa, sb = np.std(a), np.std(b)
    if sa == 0 or sb == 0:
        if np.array_equal(a, b):
            return l2, 1.0, False
        return l2, math.nan, True
    return l2, float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0)), False


@dataclass
class SobolEstimate:
    indices: np.ndarray  # (d, k), clamped
    n: int
    zero_variance: np.ndarray  # (k,)


SOBOL_CLAMP = (-0.05, 1.05)


def sobol_mcs(model, joint: JointDistribution, n: int, rng: CounterRNG, step: int = 0) -> SobolEstimate:
    """Pick-and-freeze first-order estimates with two independent base matrices."""
    if n < 1000:
        raise ValueError("n must be >= 1000")
    d = joint.dim
    UA = rng.uniform(STREAM_SOBOL, step, np.arange(n), 2 * d)
    A, B = joint.ppf(UA[:, :d]), joint.ppf(UA[:, d:])
    fA = np.atleast_2d(np.asarray(model(A), dtype=float).T).T
    fB = np.atleast_2d(np.asarray(model(B), dtype=float).T).T
    V = np.var(np.vstack([fA, fB]), axis=0)
    zero = V <= 0
    S = np.full((d, fA.shape[1]), np.nan)
    for i in range(d):
        ABi = A.copy()
        ABi[:, i] = B[:, i]
        fAB = np.atleast_2d(np.asarray(model(ABi), dtype=float).T).T
        num = np.mean(fB * (fAB - fA), axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            S[i] = np.where(zero, np.nan, num / np.where(zero, 1.0, V))
    S = np.where(np.isnan(S), np.nan, np.clip(S, *SOBOL_CLAMP))
    return SobolEstimate(S, n, zero)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    variables: list
    ks: np.ndarray  # (T, d); NaN where a side has no survivors
    wasserstein: np.ndarray  # (T, d)
    t_test: list  # per step verdicts
    l2_error: float
    cross_correlation: float
    correlation_undefined: bool
    final_stats: dict
    p_gas: np.ndarray
    p_mcs: np.ndarray
    ci_gas: np.ndarray  # (T, 2)
    ci_mcs: np.ndarray

    @property
    def ks_max(self) -> np.ndarray:
        return np.nanmax(self.ks, axis=0) if np.any(np.isfinite(self.ks)) else np.full(self.ks.shape[1], np.nan)

    @property
    def wasserstein_max(self) -> np.ndarray:
        return (np.nanmax(self.wasserstein, axis=0) if np.any(np.isfinite(self.wasserstein))
                else np.full(self.wasserstein.shape[1], np.nan))

    @property
    def t_test_passes(self) -> int:
        return int(sum(self.t_test))

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not math.isfinite(x) else float(x) for x in np.ravel(a)]

        return {
            "variables": list(self.variables),
            "steps": len(self.t_test),
            "ks_max": dict(zip(self.variables, clean(self.ks_max))),
            "wasserstein_max": dict(zip(self.variables, clean(self.wasserstein_max))),
            "ks": {v: clean(self.ks[:, j]) for j, v in enumerate(self.variables)},
            "wasserstein": {v: clean(self.wasserstein[:, j]) for j, v in enumerate(self.variables)},
            "t_test": ["pass" if x else "reject" for x in self.t_test],
            "t_test_passes": self.t_test_passes,
            "l2_error": self.l2_error,
            "cross_correlation": None if not math.isfinite(self.cross_correlation) else self.cross_correlation,
            "correlation_undefined": self.correlation_undefined,
            "final_stats": self.final_stats,
        }


def _moments(X: np.ndarray, names) -> dict:
    if X.shape[0] == 0:
        return {v: {"mean": None, "std": None} for v in names}
    return {v: {"mean": float(np.mean(X[:, j])), "std": float(np.std(X[:, j], ddof=1)) if X.shape[0] > 1 else 0.0}
            for j, v in enumerate(names)}


def compare(gas: TrajectoryEnsemble, mcs: TrajectoryEnsemble, variables, *, alpha: float = 0.05,
            B: int = 1000, seed: int = 0, wrap_dims=()) -> ComparisonReport:
    """Per-step distribution distances and safe-probability agreement."""
    T = min(gas.steps, mcs.steps)
    d = len(variables)
    ks = np.full((T, d), np.nan)
    w1 = np.full((T, d), np.nan)
    verdicts = []
    rng = CounterRNG(seed)
    ci_g, ci_m = np.zeros((T, 2)), np.zeros((T, 2))
    for t in range(T):
        A, Bm = gas.states[t], mcs.states[t]
        if A.shape[0] and Bm.shape[0]:
            for j in range(d):
                ks[t, j] = ks_statistic(A[:, j], Bm[:, j])
                w1[t, j] = wasserstein1(A[:, j], Bm[:, j])
        verdicts.append(two_sample_prop_test(int(gas.survivors[t]), gas.n_samples, int(mcs.survivors[t]),
                                             mcs.n_samples, alpha))
        ci_g[t] = bootstrap_ci(int(gas.survivors[t]), gas.n_samples, 1 - alpha, B, rng, step=2 * t)
        ci_m[t] = bootstrap_ci(int(mcs.survivors[t]), mcs.n_samples, 1 - alpha, B, rng, step=2 * t + 1)
    l2, xc, undefined = series_similarity(gas.p_safe[:T], mcs.p_safe[:T])
    final = {"gas": _moments(gas.states[T - 1], variables), "mcs": _moments(mcs.states[T - 1], variables)}
    return ComparisonReport(list(variables), ks, w1, verdicts, l2, xc, undefined, final,
                            gas.p_safe[:T].copy(), mcs.p_safe[:T].copy(), ci_g, ci_m)
