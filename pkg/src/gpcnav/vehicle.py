"""One-step vehicle models: noise transform, controllers, dynamics, the
simplified advisory logic and the ancillary advisory classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ADVISORIES = ("COC", "WL", "WR", "SL", "SR")
# ownship turn rate per advisory, deg/s; positive turns left
TURN_RATES_DEG = {"COC": 0.0, "WL": 1.5, "WR": -1.5, "SL": 3.0, "SR": -3.0}


class CholeskyError(np.linalg.LinAlgError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, 2 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def batch_cholesky(C: np.ndarray, jitter_tries: int = 3) -> np.ndarray:
    """Lower Cholesky factors of a stack of SPD matrices ``(n, k, k)``.

    Rows whose factorization fails get ``1e-10 * trace / k`` added to the
    diagonal, escalated tenfold up to ``jitter_tries`` times.  An all-zero
    matrix factors to zero (noise-free perception).
    """
    C = np.asarray(C, dtype=float)
    n, k, _ = C.shape
    L = _chol(C)
    null = ~np.any(C, axis=(1, 2))
    L[null] = 0.0
    bad = ~np.all(np.isfinite(L), axis=(1, 2))
    eps = 1e-10 * np.trace(C, axis1=1, axis2=2) / k
    eps = np.where(eps > 0, eps, 1e-10)
    tries = 0
    while np.any(bad):
        if tries >= jitter_tries:
            raise CholeskyError(f"Cholesky failed for {int(bad.sum())} matrices after jitter escalation")
        idx = np.flatnonzero(bad)
        Cj = C[idx] + (eps[idx] * 10.0**tries)[:, None, None] * np.eye(k)
        L[idx] = _chol(Cj)
        bad = ~np.all(np.isfinite(L), axis=(1, 2))
        tries += 1
    return L


def _chol(C: np.ndarray) -> np.ndarray:
    n, k, _ = C.shape
    L = np.zeros_like(C)
    with np.errstate(invalid="ignore", divide="ignore"):
        for j in range(k):
            s = C[:, j, j].copy()
            for p in range(j):
                s = s - L[:, j, p] ** 2
            L[:, j, j] = np.where(s > 0, np.sqrt(np.where(s > 0, s, 1.0)), np.nan)
            for i in range(j + 1, k):
                t = C[:, i, j].copy()
                for p in range(j):
                    t = t - L[:, i, p] * L[:, j, p]
                L[:, i, j] = t / L[:, j, j]
    return L


def transform(n, mu, cov) -> np.ndarray:
    """Map standard normal rows ``n`` to draws of N(mu, cov) via ``mu + L n``."""
    n = np.atleast_2d(np.asarray(n, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 2:
        cov = np.broadcast_to(cov, (n.shape[0],) + cov.shape)
    L = batch_cholesky(cov)
    out = mu.copy()
    k = mu.shape[1]
    for i in range(k):
        for j in range(i + 1):
            out[:, i] = out[:, i] + L[:, i, j] * n[:, j]
    return out


# ---------------------------------------------------------------------------
# safe regions


@dataclass(frozen=True)
class BoxRegion:
    lo: tuple
    hi: tuple

    def contains(self, S) -> np.ndarray:
        S = np.atleast_2d(S)
        return np.all((S >= np.asarray(self.lo)) & (S <= np.asarray(self.hi)), axis=1)


@dataclass(frozen=True)
class SeparationRegion:
    """Safe when the horizontal separation of columns (0, 1) is at least ``min_sep``."""

    min_sep: float

    def contains(self, S) -> np.ndarray:
        S = np.atleast_2d(S)
        return np.hypot(S[:, 0], S[:, 1]) >= self.min_sep


def is_safe(s, region) -> np.ndarray:
    """Closed-region membership, row-wise."""
    return region.contains(s)


# ---------------------------------------------------------------------------
# ground vehicles


@dataclass(frozen=True)
class CornMonitorDynamics:
    """Skid-steer row follower: proportional steering on perceived (h, d)."""

    v: float = 0.5
    k_h: float = 2.0
    k_d: float = 4.0
    omega_max: float = 3.0
    dt: float = 0.1

    def turn_rate(self, perceived) -> np.ndarray:
        P = np.atleast_2d(perceived)
        return np.clip(-self.k_h * P[:, 0] - self.k_d * P[:, 1], -self.omega_max, self.omega_max)

    def __call__(self, S, perceived, R=None) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        omega = self.turn_rate(perceived)
        v = np.full(S.shape[0], self.v)
        if R is not None and np.size(R):
            R = np.atleast_2d(R)
            v = v * (1.0 + R[:, 0])
            omega = omega * (1.0 + R[:, 1])
        h, d = S[:, 0], S[:, 1]
        return np.column_stack([wrap_angle(h + omega * self.dt), d + v * np.sin(h) * self.dt])


def corn_monitor_dynamics(s, perceived, r=None, dt: float = 0.1, **params) -> np.ndarray:
    return CornMonitorDynamics(dt=dt, **params)(s, perceived, r)


@dataclass(frozen=True)
class CarDynamics:
    """Pure pursuit on a kinematic bicycle, expressed relative to the lane centerline.

    State is (heading error h, lateral offset d) with d positive to the left;
    positive curvature bends the lane to the left.
    """

    v: float = 5.0
    wheelbase: float = 2.7
    lookahead: float = 4.0
    delta_max: float = 0.6
    curvature: float = 0.0
    dt: float = 0.1

    def steering(self, perceived) -> np.ndarray:
        P = np.atleast_2d(perceived)
        hh, dd = P[:, 0], P[:, 1]
        ld = self.lookahead
        if self.curvature == 0.0:
            gx = np.sqrt(np.maximum(ld**2 - dd**2, 0.0))
            gy = np.zeros_like(dd)
        else:
            R = 1.0 / self.curvature
            c = R - dd
            cphi = np.clip((c**2 + R**2 - ld**2) / (2 * c * R), -1.0, 1.0)
            phi = np.arccos(cphi)
            gx = R * np.sin(phi)
            gy = R * (1.0 - cphi)
        alpha = np.arctan2(gy - dd, gx) - hh
        delta = np.arctan(2 * self.wheelbase * np.sin(alpha) / ld)
        return np.clip(delta, -self.delta_max, self.delta_max)

    def __call__(self, S, perceived, R=None) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        delta = self.steering(perceived)
        v = np.full(S.shape[0], self.v)
        if R is not None and np.size(R):
            R = np.atleast_2d(R)
            v = v * (1.0 + R[:, 0])
            delta = delta * (1.0 + R[:, 1])
        h, d = S[:, 0], S[:, 1]
        yaw = v * np.tan(delta) / self.wheelbase
        road = v * self.curvature * np.cos(h) / (1.0 - self.curvature * d)
        return np.column_stack([wrap_angle(h + (yaw - road) * self.dt), d + v * np.sin(h) * self.dt])


def car_dynamics(s, perceived, r=None, curvature: float = 0.0, dt: float = 0.1, **params) -> np.ndarray:
    return CarDynamics(curvature=curvature, dt=dt, **params)(s, perceived, r)


# ---------------------------------------------------------------------------
# collision avoidance


@dataclass(frozen=True)
class AcasGeometry:
    """Ownship-frame encounter geometry; ownship flies along +y, x is to the right.

    State columns: crossrange x (ft), downrange y (ft), intruder heading
    measured clockwise from the reciprocal of the ownship heading (rad; 0 is
    head-on), intruder speed (ft/s).
    """

    v_own: float = 200.0
    dt: float = 1.0

    def relative_velocity(self, S) -> tuple[np.ndarray, np.ndarray]:
        S = np.atleast_2d(S)
        psi, vi = S[:, 2], S[:, 3]
        return -vi * np.sin(psi), -vi * np.cos(psi) - self.v_own

    def advance(self, S, turn_rate_deg) -> np.ndarray:
        """Constant-speed relative kinematics over one step, then rotate the frame
        by the ownship turn."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        vx, vy = self.relative_velocity(S)
        x1 = S[:, 0] + vx * self.dt
        y1 = S[:, 1] + vy * self.dt
        turn = np.deg2rad(turn_rate_deg) * self.dt
        c, s = np.cos(turn), np.sin(turn)
        return np.column_stack([c * x1 + s * y1, -s * x1 + c * y1, wrap_angle(S[:, 2] + turn), S[:, 3]])

    def cpa(self, S):
        """Time to closest approach (0 when diverging), miss distance and the
        crossrange of the closest-approach point."""
        S = np.atleast_2d(S)
        vx, vy = self.relative_velocity(S)
        x, y = S[:, 0], S[:, 1]
        v2 = np.maximum(vx**2 + vy**2, 1e-9)
        tau = np.maximum(-(x * vx + y * vy) / v2, 0.0)
        cx, cy = x + tau * vx, y + tau * vy
        return tau, np.hypot(cx, cy), cx


@dataclass(frozen=True)
class AdvisoryTable:
    """Simplified horizontal advisory logic with hysteresis.

    An alert is raised for intruders within ``alert_range`` that will pass
    within ``protect`` ft inside ``tau_max`` seconds; once alerting, the
    thresholds are relaxed by ``hysteresis``.  Sense is chosen away from the
    closest-approach side and never reversed while alerting; strong
    advisories are issued when closest approach is near in time or distance.
    With ``smooth`` the thresholds combine through a logistic score instead
    of hard comparisons.
    """

    geometry: AcasGeometry = field(default_factory=AcasGeometry)
    alert_range: float = 8000.0
    tau_max: float = 40.0
    protect: float = 2000.0
    tau_strong: float = 20.0
    hysteresis: float = 1.25
    smooth: bool = False

    def __call__(self, S, prev) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        prev = np.asarray(prev, dtype=int)
        g = self.geometry
        tau, miss, cx = g.cpa(S)
        r = np.hypot(S[:, 0], S[:, 1])
        active = prev != 0
        relax = np.where(active, self.hysteresis, 1.0)
        if self.smooth:
            score = (_logistic((self.alert_range * relax - r) / 400.0)
                     * _logistic((self.tau_max * relax - tau) / 2.0)
                     * _logistic((self.protect * relax - miss) / 150.0))
            threat = (tau > 0) & (score > 0.5)
            strong = _logistic((self.tau_strong - tau) / 2.0) + _logistic((0.5 * self.protect - miss) / 150.0) > 0.5
        else:
            threat = (r <= self.alert_range * relax) & (tau > 0) & (tau <= self.tau_max * relax) & (miss < self.protect * relax)
            strong = (tau < self.tau_strong) | (miss < 0.5 * self.protect)
        # sense: 1 = left, 2 = right
        left_prev = (prev == 1) | (prev == 3)
        right_prev = (prev == 2) | (prev == 4)
        new_left = cx >= 0
        go_left = np.where(left_prev, True, np.where(right_prev, False, new_left))
        out = np.where(go_left, np.where(strong, 3, 1), np.where(strong, 4, 2))
        return np.where(threat, out, 0).astype(int)

    def turn_rates(self, codes) -> np.ndarray:
        rates = np.array([TURN_RATES_DEG[a] for a in ADVISORIES])
        return rates[np.asarray(codes, dtype=int)]


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


@dataclass(frozen=True)
class AcasStep:
    """One step: fly the advisory in effect, then issue the next advisory from
    the pre-step geometry and the advisory in effect."""

    table: AdvisoryTable = field(default_factory=AdvisoryTable)

    def continuous(self, S, codes) -> np.ndarray:
        return self.table.geometry.advance(S, self.table.turn_rates(codes))

    def advisory(self, S, codes) -> np.ndarray:
        return self.table(S, codes)

    def __call__(self, S, codes):
        return self.continuous(S, codes), self.advisory(S, codes)


def acas_step(s, advisory, table: AdvisoryTable | None = None):
    return AcasStep(table or AdvisoryTable())(s, advisory)


# ---------------------------------------------------------------------------
# ancillary classifier


@dataclass
class AncillaryClassifier:
    """Binary decision tree over (continuous state, one-hot previous category).

    Stored as flat node arrays; ``feature == -1`` marks a leaf.
    """

    n_categories: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_value: np.ndarray
    summary: dict = field(default_factory=dict)

    def _features(self, X, cats) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        onehot = np.zeros((X.shape[0], self.n_categories))
        onehot[np.arange(X.shape[0]), np.asarray(cats, dtype=int)] = 1.0
        return np.hstack([X, onehot])

    def predict(self, X, cats) -> np.ndarray:
        F = self._features(X, cats)
        node = np.zeros(F.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not np.any(inner):
                break
            rows = np.flatnonzero(inner)
            go_left = F[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.leaf_value[node].astype(int)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def to_dict(self) -> dict:
        return {
            "format": "gpcnav.tree",
            "n_categories": self.n_categories,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_value": self.leaf_value.tolist(),
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AncillaryClassifier":
        return cls(int(d["n_categories"]), np.array(d["feature"], dtype=np.int64),
                   np.array(d["threshold"], dtype=float), np.array(d["left"], dtype=np.int64),
                   np.array(d["right"], dtype=np.int64), np.array(d["leaf_value"], dtype=np.int64),
                   d.get("summary", {}))


def fit_tree(F: np.ndarray, y: np.ndarray, n_categories: int, max_depth: int | None = None,
             min_samples_leaf: int = 1) -> AncillaryClassifier:
    from sklearn.tree import DecisionTreeClassifier

    clf = DecisionTreeClassifier(max_depth=max_depth, min_samples_leaf=min_samples_leaf, random_state=0)
    clf.fit(F, y)
    t = clf.tree_
    leaf_cls = clf.classes_[np.argmax(t.value[:, 0, :], axis=1)]
    feat = np.where(t.children_left < 0, -1, t.feature).astype(np.int64)
    return AncillaryClassifier(n_categories, feat, t.threshold.astype(float), t.children_left.astype(np.int64),
                               t.children_right.astype(np.int64), leaf_cls.astype(np.int64))


def _mode(labels: np.ndarray, n_categories: int) -> np.ndarray:
    counts = np.zeros((labels.shape[0], n_categories), dtype=np.int64)
    for c in range(n_categories):
        counts[:, c] = np.sum(labels == c, axis=1)
    return np.argmax(counts, axis=1)


def train_ancillary_classifier(points: np.ndarray, n_categories: int, model, n_samples: int = 350,
                               random_sampler=None, max_depth: int | None = None) -> AncillaryClassifier:
    """Fit the next-category classifier on ``points`` x every category.

    ``model(S, codes, R)`` returns next category codes.  ``random_sampler(n, rep)``
    supplies the model's random inputs for repetition ``rep``; when it is
    ``None`` the model is deterministic and one evaluation equals the mode.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pts = np.atleast_2d(points)
    S = np.repeat(pts, n_categories, axis=0)
    codes = np.tile(np.arange(n_categories), pts.shape[0])
    if random_sampler is None:
        labels = np.asarray(model(S, codes, None), dtype=int)
        mode = labels
    else:
        reps = np.column_stack([np.asarray(model(S, codes, random_sampler(S.shape[0], r)), dtype=int)
                                for r in range(n_samples)])
        mode = _mode(reps, n_categories)
    onehot = np.zeros((S.shape[0], n_categories))
    onehot[np.arange(S.shape[0]), codes] = 1.0
    F = np.hstack([S, onehot])
    clf = fit_tree(F, mode, n_categories, max_depth)
    acc = float(np.mean(clf.predict(S, codes) == mode))
    clf.summary = {"training_points": int(S.shape[0]), "n_samples": n_samples, "training_accuracy": acc,
                   "leaves": clf.n_leaves}
    return clf


def classifier_accuracy(clf: AncillaryClassifier, points, n_categories: int, label_fn) -> float:
    pts = np.atleast_2d(points)
    S = np.repeat(pts, n_categories, axis=0)
    codes = np.tile(np.arange(n_categories), pts.shape[0])
    return float(np.mean(clf.predict(S, codes) == np.asarray(label_fn(S, codes), dtype=int)))
