import math
from math import comb

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from gpcnav.distributions import JointDistribution, Normal, TruncatedNormal, Uniform, raw_moment
from gpcnav.orthopoly import (
    BasisOrderError,
    QuadratureError,
    eval_multi,
    gauss_quadrature,
    lagrange_basis,
    lagrange_weights,
    ortho_basis,
    stieltjes_recurrence,
    tensor_basis,
    tensor_quadrature,
    total_degree_indices,
)

MARGINALS = [Normal(0.0, 1.0), Normal(1.5, 0.4), Uniform(-1.0, 1.0), Uniform(2.0, 5.0),
             TruncatedNormal(0.0, 0.25 * math.pi / 3, -math.pi / 6, math.pi / 6),
             TruncatedNormal(0.3, 1.0, -0.5, 2.0)]


def test_lagrange_two_points():
    L = lagrange_basis([0.0, 1.0])
    np.testing.assert_allclose(L[0].coef, [1.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(L[1].coef, [0.0, 1.0], atol=1e-15)


def test_lagrange_kronecker():
    pts = [-1.0, 0.0, 1.0]
    L = lagrange_basis(pts)
    assert L[1](0.0) == pytest.approx(1.0)
    assert L[1](-1.0) == pytest.approx(0.0, abs=1e-15)
    assert L[1](1.0) == pytest.approx(0.0, abs=1e-15)
    for i, Li in enumerate(L):
        np.testing.assert_allclose([Li(p) for p in pts], np.eye(3)[i], atol=1e-14)


def test_lagrange_partition_of_unity():
    total = sum(lagrange_basis([0.0, 1.0, 2.0]), Polynomial([0.0]))
    coef = np.zeros(3)
    coef[: total.coef.size] = total.coef
    np.testing.assert_allclose(coef, [1.0, 0.0, 0.0], atol=1e-10)


def test_lagrange_rejects_duplicates():
    with pytest.raises(ValueError):
        lagrange_basis([0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        lagrange_basis([0.0])


def test_hermite_recurrence():
    r = stieltjes_recurrence(Normal(0, 1), 3)
    np.testing.assert_allclose(r.alpha[:3], 0.0, atol=1e-15)
    np.testing.assert_allclose(r.beta[1:3], [1.0, 2.0])
    b = ortho_basis(Normal(0, 1), 3)
    np.testing.assert_allclose(b.polys[2].coef, [-1, 0, 1], atol=1e-14)
    np.testing.assert_allclose(b.polys[3].coef, [0, -3, 0, 1], atol=1e-14)


def test_legendre_second_polynomial():
    b = ortho_basis(Uniform(-1, 1), 2)
    np.testing.assert_allclose(b.polys[2].coef, [-1 / 3, 0, 1], atol=1e-14)


def test_truncated_normal_recurrence_matches_moment_orthogonality():
    m = MARGINALS[-1]
    b = ortho_basis(m, 5)
    for n in range(6):
        for k in range(n):
            # E[Psi_n X^k] = 0 for k < n, from exact moments
            val = sum(c * raw_moment(m, k + p) for p, c in enumerate(b.polys[n].coef))
            assert abs(val) < 1e-9 * math.sqrt(b.norms_sq[n] * raw_moment(m, 2 * k))


@pytest.mark.parametrize("m", [Normal(0, 1), Uniform(-1, 1), TruncatedNormal(0, 0.3, -1, 1)])
def test_symmetric_measures_have_zero_alpha(m):
    np.testing.assert_allclose(stieltjes_recurrence(m, 8).alpha, 0.0, atol=1e-10)


def test_recurrence_order_limit():
    with pytest.raises(BasisOrderError):
        stieltjes_recurrence(TruncatedNormal(0, 1, -1, 1), 33)
    with pytest.raises(BasisOrderError):
        ortho_basis(Normal(0, 1), 32)


def test_gauss_normal_two_nodes():
    r = gauss_quadrature(Normal(0, 1), 2)
    np.testing.assert_allclose(r.nodes[:, 0], [-1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-14)


def test_gauss_normal_eighth_moment():
    r = gauss_quadrature(Normal(0, 1), 5)
    assert r.integrate(r.nodes[:, 0] ** 8) == pytest.approx(105.0, rel=1e-9)


def test_gauss_uniform_two_nodes():
    r = gauss_quadrature(Uniform(-1, 1), 2)
    np.testing.assert_allclose(r.nodes[:, 0], [-1 / math.sqrt(3), 1 / math.sqrt(3)], atol=1e-14)
    np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-14)


@pytest.mark.parametrize("N", [3, 7, 12, 20])
def test_gauss_agrees_with_reference_rules(N):
    x, w = hermegauss(N)
    r = gauss_quadrature(Normal(0, 1), N)
    np.testing.assert_allclose(r.nodes[:, 0], x, atol=1e-11)
    np.testing.assert_allclose(r.weights, w / w.sum(), rtol=1e-9, atol=1e-15)
    x, w = leggauss(N)
    r = gauss_quadrature(Uniform(-1, 1), N)
    np.testing.assert_allclose(r.nodes[:, 0], x, atol=1e-12)
    np.testing.assert_allclose(r.weights, w / 2, rtol=1e-10)


@pytest.mark.parametrize("m", MARGINALS)
@pytest.mark.parametrize("N", [2, 4, 6, 9])
def test_christoffel_weights_equal_lagrange_integrals(m, N):
    r = gauss_quadrature(m, N)
    np.testing.assert_allclose(r.weights, lagrange_weights(m, r.nodes[:, 0]), rtol=1e-8, atol=1e-14)


@pytest.mark.parametrize("m", MARGINALS)
def test_nodes_inside_support_and_increasing(m):
    for N in range(1, 12):
        x = gauss_quadrature(m, N).nodes[:, 0]
        lo, hi = m.support
        assert np.all((x > lo) & (x < hi))
        assert np.all(np.diff(x) > 0)


@pytest.mark.parametrize("m", MARGINALS)
def test_weights_sum_to_one(m):
    for N in (1, 3, 8):
        assert gauss_quadrature(m, N).weights.sum() == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("m", MARGINALS)
def test_orthogonality_under_quadrature(m):
    N = 6
    b = ortho_basis(m, N)
    r = gauss_quadrature(m, N + 1)
    V = b.eval(r.nodes[:, 0])
    for i in range(N + 1):
        assert b.norms_sq[i] > 0
        for j in range(i):
            assert abs(r.integrate(V[:, i] * V[:, j])) <= 1e-8 * math.sqrt(b.norms_sq[i] * b.norms_sq[j])


def test_quadrature_error_on_bad_order():
    with pytest.raises((QuadratureError, ValueError)):
        gauss_quadrature(Normal(0, 1), 0)


def test_basis_counts():
    j4 = JointDistribution(tuple(Normal(0, 1) for _ in range(4)))
    b = tensor_basis(j4, 4)
    assert len(b) == 70
    assert b.interaction_count() == 53
    assert len(tensor_basis(JointDistribution((Normal(0, 1),)), 3)) == 4
    b2 = tensor_basis(JointDistribution((Normal(0, 1), Normal(0, 1))), 2)
    assert [tuple(i) for i in b2.indices] == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


@pytest.mark.parametrize("d", range(1, 6))
@pytest.mark.parametrize("N", range(0, 7))
def test_total_degree_cardinality(d, N):
    idx = total_degree_indices(d, N)
    assert len(idx) == comb(N + d, d)
    assert tuple(idx[0]) == (0,) * d
    deg = idx.sum(axis=1)
    assert np.all(np.diff(deg) >= 0) and deg.max() <= N


def test_tensor_quadrature_sizes_and_weights():
    j4 = JointDistribution(tuple(MARGINALS[:4]))
    r = tensor_quadrature(j4, 5)
    assert len(r) == 625
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-10)
    r2 = tensor_quadrature(JointDistribution((Normal(0, 1), Normal(0, 1))), 2)
    assert sorted(map(tuple, r2.nodes.round(12))) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    np.testing.assert_allclose(r2.weights, 0.25)


def test_tensor_quadrature_cap():
    j = JointDistribution(tuple(Normal(0, 1) for _ in range(6)))
    with pytest.raises(QuadratureError):
        tensor_quadrature(j, 11)
    with pytest.raises(QuadratureError):
        tensor_quadrature(j, 3, cap=100)


def test_eval_multi_examples():
    b = tensor_basis(JointDistribution((Normal(0, 1), Normal(0, 1))), 2)
    assert eval_multi(b, (0, 0), (3.3, -2.0)) == 1.0
    assert eval_multi(b, (2, 0), (0.0, 7.0)) == pytest.approx(-1.0)
    assert eval_multi(b, (1, 1), (1.5, -0.4)) == pytest.approx(1.5 * -0.4)


def test_multi_basis_eval_matches_eval_multi():
    j = JointDistribution(tuple(MARGINALS[:3]))
    b = tensor_basis(j, 3)
    X = np.array([[0.1, 1.2, 0.3], [-0.7, 2.0, -0.9]])
    P = b.eval(X)
    for p, idx in enumerate(b.indices):
        for r in range(2):
            assert P[r, p] == pytest.approx(eval_multi(b, idx, X[r]), rel=1e-12, abs=1e-14)
