"""Polynomial-chaos surrogates for estimating the safe-state probability of
vehicles with learned perception."""

from .distributions import JointDistribution, Normal, TruncatedNormal, Uniform, join
from .gpc import GpcModel, MegpcModel, build, evaluate, project, sobol_first_order
from .rng import CounterRNG

__all__ = [
    "CounterRNG",
    "GpcModel",
    "JointDistribution",
    "MegpcModel",
    "Normal",
    "TruncatedNormal",
    "Uniform",
    "build",
    "evaluate",
    "join",
    "project",
    "sobol_first_order",
]
__version__ = "0.1.0"
