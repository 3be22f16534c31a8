from dataclasses import replace

import numpy as np
import pytest

from sosmanifold.attdyn import build_example1, build_example2, circle_toy_system
from sosmanifold.polyalg import MonomialBasis, Polynomial, evaluate, monomial_basis
from sosmanifold.sdp import Status
from sosmanifold.soscert import (
    LyapunovCertificate,
    SosProgramSpec,
    SpecificationError,
    build_agas_program,
    certificate_residuals,
    certify,
    classify,
    degree_budget,
    gram_parameterize,
    newton_prune,
    product_term,
    vanishing_reduction,
)


@pytest.mark.parametrize(
    "builder,expected",
    [(circle_toy_system, 8), (build_example1, 8), (build_example2, 8)],
)
def test_degree_budget(builder, expected):
    assert degree_budget(SosProgramSpec(builder(), deg_V=4, deg_p=6)) == expected


def test_degree_budget_rounds_up_to_even():
    sys = circle_toy_system()  # deg f = 2, deg h = 2, k = 2
    assert degree_budget(SosProgramSpec(sys, deg_V=6, deg_p=0)) == 8  # 2 + 6 - 1 = 7 -> 8


@pytest.mark.parametrize(
    "kwargs",
    [dict(deg_V=3), dict(deg_V=0), dict(deg_p=-2), dict(eps1=0.0), dict(eps2=-1e-5), dict(objective="max")],
)
def test_bad_program_settings_rejected(kwargs):
    with pytest.raises(SpecificationError):
        SosProgramSpec(circle_toy_system(), **kwargs)


def test_gram_expansion_matches_quadratic_form():
    rng = np.random.default_rng(3)
    basis = monomial_basis(3, 2)
    G = rng.normal(size=(len(basis), len(basis)))
    Q = G @ G.T
    poly = gram_parameterize(basis).expand(Q)
    for _ in range(20):
        x = rng.normal(size=3)
        z = basis.evaluate(x)
        assert evaluate(poly, x) == pytest.approx(z @ Q @ z, rel=1e-12, abs=1e-12)


def test_newton_prune_motzkin_support():
    # x^4 y^2 + x^2 y^4 - 3 x^2 y^2 + 1: the half Newton polytope holds
    # 1, x y, x^2 y, x y^2 only
    support = [(4, 2), (2, 4), (2, 2), (0, 0)]
    basis = newton_prune(monomial_basis(2, 3), support)
    assert set(basis) == {(0, 0), (1, 1), (2, 1), (1, 2)}


def test_vanishing_reduction_spans_kernel():
    basis = monomial_basis(2, 3)
    points = [(0.0, 0.0), (-2.0, 0.0), (0.5, -1.5)]
    N = vanishing_reduction(basis, points)
    assert N.shape == (len(basis), len(basis) - 3)
    for p in points:
        assert np.max(np.abs(basis.evaluate(p) @ N)) <= 1e-12
    assert np.linalg.matrix_rank(N) == N.shape[1]
    assert np.max(np.abs(N)) <= 1.0 + 1e-12


def test_product_term_vanishes_exactly_at_equilibria():
    sys = circle_toy_system()
    prod = product_term(sys)
    for eq in sys.equilibria:
        assert evaluate(prod, eq) == 0.0
    assert evaluate(prod, (0.0, 1.0)) == pytest.approx(1.0 * 5.0)


def test_program_shapes_and_basis_reduction():
    prob, maps = build_agas_program(SosProgramSpec(build_example2()))
    full = len(monomial_basis(7, 4))
    assert full == 330
    assert len(maps.basis2) < full  # pruning removed monomials
    assert prob.blocks == (maps.N1.shape[1], maps.N2.shape[1])
    assert prob.A.shape[0] == prob.b.size


@pytest.fixture(scope="module")
def circle_cert():
    cert, sol, _ = certify(SosProgramSpec(circle_toy_system()))
    assert sol.status == Status.OPTIMAL
    return cert


def test_circle_certificate_identities(circle_cert):
    res = certificate_residuals(circle_cert, circle_toy_system())
    assert classify(res) == "valid"
    assert res["min_eig_posdef"] >= -1e-10 and res["min_eig_decrease"] >= -1e-10
    assert evaluate(circle_cert.V, (0.0, 0.0)) == 0.0


def test_certificate_json_roundtrip(circle_cert):
    back = LyapunovCertificate.from_json(circle_cert.to_json())
    assert back.V == circle_cert.V and back.p == circle_cert.p
    np.testing.assert_array_equal(back.gram_decrease[1], circle_cert.gram_decrease[1])
    assert back.status == circle_cert.status


def test_tampered_certificate_fails_classification(circle_cert):
    bad = LyapunovCertificate.from_json(circle_cert.to_json())
    bad.V = bad.V + Polynomial.monomial((2, 0), 1e-3 * bad.V.max_abs_coeff() + 1e-6)
    assert classify(certificate_residuals(bad, circle_toy_system())) == "failed"


def test_missing_equilibrium_makes_program_infeasible():
    # theta = pi is an equilibrium of the flow; omitting it forces a strict
    # decrease where f vanishes
    sys = replace(circle_toy_system(), equilibria=((0.0, 0.0),))
    cert, sol, _ = certify(SosProgramSpec(sys))
    assert cert is None
    assert sol.status == Status.INFEASIBLE


def test_empty_basis_rejected():
    with pytest.raises(ValueError):
        gram_parameterize(MonomialBasis([], 2))
