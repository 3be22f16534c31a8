import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sosmanifold.polyalg import (
    CompiledPolys,
    DimensionError,
    MonomialBasis,
    Polynomial,
    basis_size,
    differentiate,
    evaluate,
    gradient,
    gradient_inner,
    monomial_basis,
    shifted_norm_sq,
    substitute_affine,
    sum_squares,
)


def random_poly(rng, nvars, maxdeg, nterms):
    basis = monomial_basis(nvars, maxdeg)
    idx = rng.choice(len(basis), size=min(nterms, len(basis)), replace=False)
    return Polynomial(nvars, {basis[i]: rng.normal() for i in idx})


coeffs = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)
exps2 = st.tuples(st.integers(0, 3), st.integers(0, 3))
polys2 = st.dictionaries(exps2, coeffs, max_size=6).map(lambda d: Polynomial(2, d))
points2 = st.tuples(*[st.floats(min_value=-2, max_value=2, allow_nan=False)] * 2)


def test_zero_coefficients_are_dropped():
    p = Polynomial(2, {(1, 0): 0.0, (0, 1): 2.0})
    assert p.terms == {(0, 1): 2.0}
    assert (p - p).is_zero()


def test_mixed_nvars_rejected():
    with pytest.raises(DimensionError):
        Polynomial.variable(0, 2) + Polynomial.variable(0, 3)
    with pytest.raises(DimensionError):
        Polynomial(2, {(1, 0, 0): 1.0})


def test_product_and_power():
    x, y = Polynomial.variable(0, 2), Polynomial.variable(1, 2)
    p = (x + y) ** 3
    assert p.terms == {(3, 0): 1.0, (2, 1): 3.0, (1, 2): 3.0, (0, 3): 1.0}
    assert p.degree == 3
    with pytest.raises(ValueError):
        x ** -1


def test_grlex_ordering_of_items():
    p = Polynomial(2, {(0, 2): 1.0, (1, 0): 1.0, (2, 0): 1.0, (0, 0): 1.0, (1, 1): 1.0})
    assert [e for e, _ in p.items()] == [(0, 0), (1, 0), (0, 2), (1, 1), (2, 0)]


def test_monomial_basis_counts():
    for n, d in [(2, 4), (6, 3), (7, 3), (7, 4)]:
        assert len(monomial_basis(n, d)) == basis_size(n, d) == math.comb(n + d, d)
    assert len(monomial_basis(7, 4)) == 330
    b = monomial_basis(3, 2, mindeg=1)
    assert (0, 0, 0) not in b and len(b) == 9
    with pytest.raises(ValueError):
        MonomialBasis([(1, 0), (0, 0)])


def test_gradient_of_quadratic():
    x, y = Polynomial.variable(0, 2), Polynomial.variable(1, 2)
    V = x * x + 3.0 * x * y
    g = gradient(V)
    assert g[0] == 2.0 * x + 3.0 * y
    assert g[1] == 3.0 * x
    f = [y, -x]
    assert gradient_inner(V, f) == 2.0 * x * y + 3.0 * y * y - 3.0 * x * x


def test_shifted_norm_and_sum_squares():
    q = shifted_norm_sq([-2.0, 0.0])
    assert evaluate(q, [-2.0, 0.0]) == 0.0
    assert evaluate(q, [0.0, 1.0]) == pytest.approx(5.0)
    assert sum_squares(3, [0, 2]).terms == {(2, 0, 0): 1.0, (0, 0, 2): 1.0}


def test_json_roundtrip_exact():
    rng = np.random.default_rng(3)
    p = random_poly(rng, 4, 4, 20)
    q = Polynomial.from_json(p.to_json())
    assert q == p
    assert json.loads(p.to_json())[0]["exponents"] == [0, 0, 0, 0] or len(p) > 0


def test_compiled_matches_scalar_evaluation():
    rng = np.random.default_rng(0)
    polys = [random_poly(rng, 5, 4, 15) for _ in range(3)]
    X = rng.normal(size=(50, 5))
    got = CompiledPolys(polys)(X)
    ref = np.array([[evaluate(p, x) for p in polys] for x in X])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_substitute_affine_against_evaluation():
    rng = np.random.default_rng(1)
    p = random_poly(rng, 3, 3, 10)
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    q = substitute_affine(p, A, b)
    for _ in range(10):
        x = rng.normal(size=3)
        assert evaluate(q, x) == pytest.approx(evaluate(p, A @ x + b), rel=1e-10, abs=1e-10)
    with pytest.raises(np.linalg.LinAlgError):
        substitute_affine(p, np.zeros((3, 3)), b)


def test_gradient_matches_central_differences():
    """100 random (polynomial, point) pairs, relative agreement 1e-6."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        p = random_poly(rng, n, 4, 12)
        x = rng.uniform(-1, 1, size=n)
        g = np.array([evaluate(gi, x) for gi in gradient(p)])
        h = 1e-5
        fd = np.array([(evaluate(p, x + h * e) - evaluate(p, x - h * e)) / (2 * h) for e in np.eye(n)])
        worst = max(worst, np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))))
    assert worst <= 1e-6


@settings(max_examples=60, deadline=None)
@given(polys2, polys2, polys2)
def test_ring_axioms(a, b, c):
    assert (a + b) == (b + a)
    assert ((a * b) - (b * a)).max_abs_coeff() <= 1e-9 * (1 + (a * b).max_abs_coeff())
    lhs, rhs = a * (b + c), a * b + a * c
    assert (lhs - rhs).max_abs_coeff() <= 1e-9 * (1 + lhs.max_abs_coeff() + rhs.max_abs_coeff())


@settings(max_examples=60, deadline=None)
@given(polys2, polys2, points2)
def test_evaluation_is_a_homomorphism(a, b, x):
    pa, pb = evaluate(a, x), evaluate(b, x)
    assert evaluate(a * b, x) == pytest.approx(pa * pb, rel=1e-9, abs=1e-6)
    assert evaluate(a + b, x) == pytest.approx(pa + pb, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(polys2, polys2)
def test_leibniz_rule(a, b):
    for i in range(2):
        lhs = differentiate(a * b, i)
        rhs = differentiate(a, i) * b + a * differentiate(b, i)
        assert (lhs - rhs).max_abs_coeff() <= 1e-9 * (1 + lhs.max_abs_coeff())


@settings(max_examples=40, deadline=None)
@given(polys2)
def test_degree_of_derivative(a):
    for i in range(2):
        d = differentiate(a, i)
        assert d.is_zero() or d.degree <= a.degree - 1
