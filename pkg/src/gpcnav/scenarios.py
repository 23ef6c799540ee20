"""Scenario registry: safe sets, input distributions, oracles and one-step models.

Each scenario is assembled from a configuration section; every numeric field
has a default listed in ``DEFAULTS`` below.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .distributions import JointDistribution, TruncatedNormal, joint_from_list, std_normals
from .perception import GroundTruthGrid, PerceptionModel, PerceptionOracle
from .vehicle import (
    ADVISORIES,
    AcasGeometry,
    AcasStep,
    AdvisoryTable,
    BoxRegion,
    CarDynamics,
    CornMonitorDynamics,
    SeparationRegion,
    transform,
)


class ConfigError(ValueError):
    """Invalid or missing configuration field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _tn_over(lo: float, hi: float) -> dict:
    # safe-set weight measure: centred truncated normal, sigma = quarter width
    return {"kind": "truncated_normal", "mu": 0.5 * (lo + hi), "sigma": 0.25 * (hi - lo), "lo": lo, "hi": hi}


_CORN_SAFE = [[-math.pi / 6, -0.228], [math.pi / 6, 0.228]]
_CAR_SAFE = [[-math.pi / 12, -1.2], [math.pi / 12, 1.2]]

DEFAULTS = {
    "corn_monitor": {
        "family": "ground",
        "state_names": ["heading", "distance"],
        "safe_box": _CORN_SAFE,
        "state_dist": [_tn_over(-math.pi / 6, math.pi / 6), _tn_over(-0.228, 0.228)],
        "init_dist": [
            {"kind": "truncated_normal", "mu": 0.0, "sigma": 0.1, "lo": -math.pi / 6, "hi": math.pi / 6},
            {"kind": "truncated_normal", "mu": 0.0, "sigma": 0.06, "lo": -0.228, "hi": 0.228},
        ],
        "other_dist": [],
        "dynamics": {"v": 0.5, "k_h": 2.0, "k_d": 4.0, "omega_max": 3.0, "dt": 0.1},
        "oracle": {
            "bias_terms": [[0, [0, 0], 0.02], [0, [1, 0], 0.08], [0, [1, 1], 0.6], [1, [0, 0], 0.1],
                           [1, [0, 1], 0.06], [1, [0, 2], 0.8], [1, [2, 1], -0.5]],
            "std": [0.15, 0.12],
            "std_growth": [0.6, 0.4],
            "rho": 0.2,
            "rho_slope": 0.3,
        },
    },
    "car_straight": {
        "family": "ground",
        "state_names": ["heading", "distance"],
        "safe_box": _CAR_SAFE,
        "state_dist": [_tn_over(-math.pi / 12, math.pi / 12), _tn_over(-1.2, 1.2)],
        "init_dist": [
            {"kind": "truncated_normal", "mu": 0.0, "sigma": 0.05, "lo": -math.pi / 12, "hi": math.pi / 12},
            {"kind": "truncated_normal", "mu": 0.1, "sigma": 0.3, "lo": -1.2, "hi": 1.2},
        ],
        "other_dist": [],
        "dynamics": {"v": 5.0, "wheelbase": 2.7, "lookahead": 4.0, "delta_max": 0.6, "curvature": 0.0, "dt": 0.1},
        "oracle": {
            "bias_terms": [[0, [0, 0], 0.01], [0, [1, 0], 0.05], [1, [0, 0], 0.2], [1, [0, 1], 0.05],
                           [1, [0, 2], -0.03]],
            "std": [0.08, 0.7],
            "std_growth": [0.3, 0.3],
            "rho": 0.1,
            "rho_slope": 0.2,
        },
    },
    "acas_table_like": {
        "family": "acas",
        "state_names": ["crossrange", "downrange", "heading", "intruder_speed"],
        "min_separation": 500.0,
        "state_box": [[-10000.0, -10000.0, -math.pi, 150.0], [10000.0, 10000.0, math.pi, 250.0]],
        "init_dist": [
            {"kind": "normal", "mu": 0.0, "sigma": 1000.0},
            {"kind": "uniform", "lo": 2000.0, "hi": 9000.0},
            {"kind": "uniform", "lo": -0.8, "hi": 0.8},
            {"kind": "uniform", "lo": 150.0, "hi": 250.0},
        ],
        "initial_advisory": "COC",
        "geometry": {"v_own": 200.0, "dt": 1.0},
        "table": {"alert_range": 8000.0, "tau_max": 40.0, "protect": 2000.0, "tau_strong": 20.0,
                  "hysteresis": 1.25, "smooth": False},
        "classifier": {"levels": [61, 61, 33, 5], "n_samples": 350, "max_depth": None,
                       "box": [[-6000.0, -3000.0, -math.pi, 150.0], [6000.0, 10000.0, math.pi, 250.0]]},
    },
}

DEFAULTS["car_curved"] = copy.deepcopy(DEFAULTS["car_straight"])
DEFAULTS["car_curved"]["dynamics"]["curvature"] = 0.01
DEFAULTS["acas_nn_like"] = copy.deepcopy(DEFAULTS["acas_table_like"])
DEFAULTS["acas_nn_like"]["table"]["smooth"] = True

SCENARIOS = tuple(sorted(DEFAULTS))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    name: str
    params: dict
    state_names: list
    safe: object
    state_dist: JointDistribution
    init_dist: JointDistribution
    other_dist: JointDistribution | None = None
    oracle: PerceptionOracle | None = None
    dynamics: object = None
    categories: tuple | None = None
    initial_category: int = 0
    acas: AcasStep | None = None
    wrap_dims: tuple = ()
    perception_box: tuple | None = None

    @property
    def state_dim(self) -> int:
        return self.state_dist.dim

    @property
    def raw_dim(self) -> int:
        """Dimension of the standard-normal raw perception sample (0 for ground truth)."""
        return self.oracle.dim if self.oracle is not None else 0

    @property
    def other_dim(self) -> int:
        return self.other_dist.dim if self.other_dist is not None else 0

    @property
    def categorical(self) -> bool:
        return self.categories is not None

    def gpc_joint(self) -> JointDistribution:
        parts = list(self.state_dist.marginals) + list(std_normals(self.raw_dim))
        if self.other_dist is not None:
            parts += list(self.other_dist.marginals)
        return JointDistribution(tuple(parts))

    def input_names(self) -> list:
        names = list(self.state_names) + [f"Raw{i}" for i in range(self.raw_dim)]
        return names + [f"R{i}" for i in range(self.other_dim)]

    def perception_grid(self, levels) -> GroundTruthGrid:
        lo, hi = self.perception_box
        return GroundTruthGrid(tuple(lo), tuple(hi), tuple(int(n) for n in levels))

    def classifier_grid(self, levels) -> GroundTruthGrid:
        """Training grid of the ancillary classifier (defaults to the state box)."""
        box = (self.params.get("classifier") or {}).get("box") or self.perception_box
        lo, hi = box
        return GroundTruthGrid(tuple(lo), tuple(hi), tuple(int(n) for n in levels))

    def is_safe(self, S) -> np.ndarray:
        return self.safe.contains(S)

    def abstracted_step(self, S, N, R, m_per: PerceptionModel | None) -> np.ndarray:
        """Perception model -> transformed raw sample -> control and dynamics."""
        if self.oracle is None:
            perceived = np.atleast_2d(S)
        else:
            mu, cov = m_per.predict(S)
            perceived = transform(N, mu, cov)
        return self.dynamics(S, perceived, R)

    def true_step(self, S, E, R) -> np.ndarray:
        """Oracle-backed step used by the Monte-Carlo baseline."""
        perceived = np.atleast_2d(S) if self.oracle is None else self.oracle.perceive(S, E)
        return self.dynamics(S, perceived, R)


def build_scenario(section: dict) -> Scenario:
    if not isinstance(section, dict) or "name" not in section:
        raise ConfigError("scenario.name", "missing scenario name")
    name = section["name"]
    if name not in DEFAULTS:
        raise ConfigError("scenario.name", f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    p = _merge(DEFAULTS[name], {k: v for k, v in section.items() if k != "name"})
    try:
        if p["family"] == "ground":
            return _ground(name, p)
        return _acas(name, p)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scenario.{name}", str(exc)) from None


def _ground(name: str, p: dict) -> Scenario:
    lo, hi = p["safe_box"]
    state_dist = joint_from_list(p["state_dist"])
    init_dist = joint_from_list(p["init_dist"])
    other = joint_from_list(p.get("other_dist") or [])
    o = p["oracle"]
    scale = 0.5 * (np.array(hi) - np.array(lo))
    oracle = PerceptionOracle(2, scale, [(int(a), tuple(b), float(c)) for a, b, c in o["bias_terms"]],
                              o["std"], o["std_growth"], float(o["rho"]), float(o["rho_slope"]))
    if name == "corn_monitor":
        dyn = CornMonitorDynamics(**p["dynamics"])
    else:
        dyn = CarDynamics(**p["dynamics"])
    return Scenario(name, p, list(p["state_names"]), BoxRegion(tuple(lo), tuple(hi)), state_dist, init_dist,
                    other, oracle, dyn, wrap_dims=(0,), perception_box=(tuple(lo), tuple(hi)))


def _acas(name: str, p: dict) -> Scenario:
    lo, hi = p["state_box"]
    state_dist = JointDistribution(tuple(TruncatedNormal(0.5 * (a + b), 0.25 * (b - a), a, b)
                                         for a, b in zip(lo, hi)))
    init_dist = joint_from_list(p["init_dist"])
    geom = AcasGeometry(**p["geometry"])
    table = AdvisoryTable(geometry=geom, **p["table"])
    cats = tuple(ADVISORIES)
    if p["initial_advisory"] not in cats:
        raise ConfigError(f"scenario.{name}.initial_advisory", f"must be one of {cats}")
    return Scenario(name, p, list(p["state_names"]), SeparationRegion(float(p["min_separation"])), state_dist,
                    init_dist, None, None, None, categories=cats, initial_category=cats.index(p["initial_advisory"]),
                    acas=AcasStep(table), wrap_dims=(2,), perception_box=(tuple(lo), tuple(hi)))
