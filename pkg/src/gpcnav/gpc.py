"""GPC projection, surrogate evaluation, analytic Sobol indices and
multi-element composition over a categorical state variable."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .distributions import JointDistribution, joint_from_list
from .orthopoly import (
    MultiIndexBasis,
    OrthoBasis,
    QuadratureRule,
    Recurrence,
    tensor_basis,
    tensor_quadrature,
)
from .rng import STREAM_L2, CounterRNG

FORMAT_VERSION = 1


class ProjectionError(ArithmeticError):
    pass


class ZeroVarianceError(ArithmeticError):
    pass


def _chunks(n: int, parts: int) -> list[slice]:
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(parts)]


def map_rows(f: Callable[[np.ndarray], np.ndarray], X: np.ndarray, threads: int = 1) -> np.ndarray:
    """Apply a row-wise vectorised ``f`` to ``X``, optionally over thread chunks.

    ``f`` must treat rows independently so the result does not depend on
    ``threads``.
    """
    if threads <= 1 or X.shape[0] < 2:
        return np.asarray(f(X), dtype=float)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda s: np.asarray(f(X[s]), dtype=float), _chunks(X.shape[0], threads)))
    return np.concatenate(parts, axis=0)


@dataclass
class GpcModel:
    basis: MultiIndexBasis
    coeffs: np.ndarray  # (P, k)
    output_names: list = field(default_factory=list)
    node_evaluations: int = 0

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[0] != len(self.basis):
            raise ValueError("coefficient rows must match the basis")
        if not np.all(np.isfinite(self.coeffs)):
            raise ProjectionError("non-finite GPC coefficients")
        if not self.output_names:
            self.output_names = [f"y{i}" for i in range(self.coeffs.shape[1])]

    @property
    def input_dim(self) -> int:
        return self.basis.dim

    @property
    def output_dim(self) -> int:
        return self.coeffs.shape[1]

    def __call__(self, X) -> np.ndarray:
        return evaluate(self, X)

    def mean(self) -> np.ndarray:
        return self.coeffs[0].copy()

    def variance(self) -> np.ndarray:
        return np.sum(self.coeffs[1:] ** 2 * self.basis.norms_sq[1:, None], axis=0)

    def to_dict(self) -> dict:
        b = self.basis
        return {
            "format": "gpcnav.gpc",
            "version": FORMAT_VERSION,
            "order": b.order,
            "joint": b.joint.to_list(),
            "recurrences": [
                {"alpha": f.recurrence.alpha.tolist(), "beta": f.recurrence.beta.tolist()} for f in b.factors
            ],
            "indices": b.indices.tolist(),
            "output_names": list(self.output_names),
            "coeffs": self.coeffs.tolist(),
            "node_evaluations": self.node_evaluations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpcModel":
        if d.get("format") != "gpcnav.gpc":
            raise ValueError("not a serialized GPC model")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GPC model version {d.get('version')}")
        joint = joint_from_list(d["joint"])
        order = int(d["order"])
        factors = []
        for m, rec in zip(joint.marginals, d["recurrences"]):
            r = Recurrence(np.array(rec["alpha"], dtype=float), np.array(rec["beta"], dtype=float))
            polys = [Polynomial([1.0])]
            if order >= 1:
                polys.append(Polynomial([-r.alpha[0], 1.0]))
            for k in range(1, order):
                polys.append(Polynomial([-r.alpha[k], 1.0]) * polys[k] - r.beta[k] * polys[k - 1])
            factors.append(OrthoBasis(m, order, r, tuple(polys), np.cumprod(r.beta[: order + 1])))
        idx = np.array(d["indices"], dtype=np.int64).reshape(-1, joint.dim)
        norms = np.ones(idx.shape[0])
        for k, fac in enumerate(factors):
            norms = norms * fac.norms_sq[idx[:, k]]
        basis = MultiIndexBasis(joint, order, idx, tuple(factors), norms)
        return cls(basis, np.array(d["coeffs"], dtype=float), list(d["output_names"]),
                   int(d.get("node_evaluations", 0)))


def project(f: Callable[[np.ndarray], np.ndarray], basis: MultiIndexBasis, rule: QuadratureRule,
            output_names: Sequence[str] | None = None, threads: int = 1) -> GpcModel:
    """Discrete projection ``c_i = sum_q w_q f(x_q) Psi_i(x_q) / ||Psi_i||^2``.

    ``f`` maps an ``(n, d)`` array to ``(n, k)``; every node is evaluated once.
    """
    if rule.dim != basis.dim:
        raise ValueError(f"rule has {rule.dim} dims, basis has {basis.dim}")
    Y = map_rows(f, rule.nodes, threads)
    if Y.ndim == 1:
        Y = Y[:, None]
    bad = ~np.all(np.isfinite(Y), axis=1)
    if np.any(bad):
        q = int(np.flatnonzero(bad)[0])
        raise ProjectionError(f"non-finite model output at node {q}: x={rule.nodes[q].tolist()}")
    Phi = basis.eval(rule.nodes)
    acc = np.zeros((len(basis), Y.shape[1]))
    for q in range(len(rule)):
        acc += rule.weights[q] * np.outer(Phi[q], Y[q])
    coeffs = acc / basis.norms_sq[:, None]
    return GpcModel(basis, coeffs, list(output_names or []), node_evaluations=len(rule))


def build(f, joint: JointDistribution, order: int, nodes_per_dim: int | None = None,
          output_names=None, threads: int = 1) -> GpcModel:
    """Total-degree basis of ``order`` with an ``order + 1`` point tensor Gauss rule."""
    basis = tensor_basis(joint, order)
    rule = tensor_quadrature(joint, nodes_per_dim or order + 1)
    return project(f, basis, rule, output_names, threads)


def evaluate(m: GpcModel, X) -> np.ndarray:
    """Surrogate values ``sum_i c_i Psi_i(x)``; shape ``(n, k)``.

    The sum runs over basis terms in a fixed order and is elementwise across
    rows, so results do not depend on how rows are batched.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Phi = m.basis.eval(X)
    out = np.zeros((X.shape[0], m.output_dim))
    for p in range(len(m.basis)):
        out += Phi[:, p : p + 1] * m.coeffs[p]
    return out


def sobol_first_order(m: GpcModel, on_zero: str = "raise") -> np.ndarray:
    """Closed-form first-order Sobol indices, shape ``(input_dim, output_dim)``.

    ``on_zero="nan"`` reports a column of NaN for constant outputs instead of
    raising.
    """
    contrib = m.coeffs**2 * m.basis.norms_sq[:, None]
    active = m.basis.indices != 0
    V = np.sum(contrib[1:], axis=0)
    S = np.zeros((m.input_dim, m.output_dim))
    only = active.sum(axis=1) == 1
    for j in range(m.input_dim):
        sel = only & active[:, j]
        S[j] = np.sum(contrib[sel], axis=0)
    # projection roundoff leaves O(eps^2) variance on constant outputs
    zero = V <= 1e-24 * np.maximum(contrib[0], np.finfo(float).tiny)
    if np.any(zero):
        if on_zero == "raise":
            raise ZeroVarianceError(f"zero variance in outputs {np.flatnonzero(zero).tolist()}")
        S[:, zero] = np.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        S[:, ~zero] = S[:, ~zero] / V[~zero]
    return S


def empirical_l2_error(m: GpcModel, f, j: JointDistribution, n: int, rng: CounterRNG,
                       stream: int = STREAM_L2) -> float:
    """RMS of ``||f(x) - f_N(x)||`` over ``n`` draws from ``j``."""
    if n < 100:
        raise ValueError("n must be >= 100")
    X = j.sample(rng, n, stream=stream)
    Y = np.asarray(f(X), dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    diff = Y - evaluate(m, X)
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


@dataclass
class MegpcModel:
    """One surrogate per categorical value and a classifier for the next value."""

    categories: list
    elements: dict
    classifier: object = None

    def __post_init__(self):
        missing = [c for c in self.categories if c not in self.elements]
        if missing:
            raise ValueError(f"no element model for categories {missing}")
        shapes = {(len(e.basis), e.input_dim, e.output_dim) for e in self.elements.values()}
        if len(shapes) != 1:
            raise ValueError("element models must share the basis shape")

    @property
    def input_dim(self) -> int:
        return next(iter(self.elements.values())).input_dim

    @property
    def output_names(self) -> list:
        return next(iter(self.elements.values())).output_names

    def evaluate_continuous(self, X, cats) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cats = np.asarray(cats)
        out = np.zeros((X.shape[0], next(iter(self.elements.values())).output_dim))
        for code, c in enumerate(self.categories):
            sel = cats == code
            if np.any(sel):
                out[sel] = evaluate(self.elements[c], X[sel])
        return out

    def __call__(self, X, cats) -> tuple[np.ndarray, np.ndarray]:
        return megpc_evaluate(self, X, cats)

    def to_dict(self) -> dict:
        return {
            "format": "gpcnav.megpc",
            "version": FORMAT_VERSION,
            "categories": list(self.categories),
            "elements": {c: self.elements[c].to_dict() for c in self.categories},
            "classifier": self.classifier.to_dict() if self.classifier is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict, classifier_loader=None) -> "MegpcModel":
        if d.get("format") != "gpcnav.megpc":
            raise ValueError("not a serialized MEGPC model")
        elements = {c: GpcModel.from_dict(e) for c, e in d["elements"].items()}
        clf = None
        if d.get("classifier") is not None and classifier_loader is not None:
            clf = classifier_loader(d["classifier"])
        return cls(list(d["categories"]), elements, clf)


def megpc_project(f, categories: Sequence, basis: MultiIndexBasis | dict, rule: QuadratureRule | dict,
                  classifier=None, output_names=None, threads: int = 1) -> MegpcModel:
    """Project ``f(X, code)`` separately for each category code.

    ``basis`` and ``rule`` may be shared or given per category.
    """
    elements = {}
    for code, c in enumerate(categories):
        b = basis[c] if isinstance(basis, dict) else basis
        r = rule[c] if isinstance(rule, dict) else rule
        elements[c] = project(lambda X, code=code: f(X, code), b, r, output_names, threads)
    return MegpcModel(list(categories), elements, classifier)


def megpc_evaluate(m: MegpcModel, X, cats) -> tuple[np.ndarray, np.ndarray]:
    """Continuous next state from the element matching each row's category and
    the next category code from the ancillary classifier."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cats = np.asarray(cats)
    cont = m.evaluate_continuous(X, cats)
    if m.classifier is None:
        return cont, cats.copy()
    return cont, m.classifier.predict(X, cats)
