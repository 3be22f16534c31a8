import json
import math
from dataclasses import replace

import numpy as np
import pytest

from sosmanifold.attdyn import build_example1, build_example2, circle_toy_system
from sosmanifold.polyalg import CompiledPolys, Polynomial
from sosmanifold.soscert import LyapunovCertificate, SosProgramSpec, certify
from sosmanifold.validate import (
    IntegrationError,
    UnsupportedConstraint,
    instability_summary,
    check_conditions,
    project_to_manifold,
    sample_manifold,
    simulate,
    simulate_batch,
    v_along_trajectory,
)


@pytest.fixture(scope="module")
def circle():
    sys = circle_toy_system()
    cert, _, _ = certify(SosProgramSpec(sys))
    assert cert is not None
    return sys, cert


@pytest.mark.parametrize("builder", [circle_toy_system, build_example1, build_example2])
def test_samples_lie_on_manifold(builder):
    sys = builder()
    X = sample_manifold(sys, 500, rate_box=0.5, seed=4)
    assert X.shape == (500, sys.n)
    assert np.max(np.abs(CompiledPolys([sys.h])(X))) <= 1e-12
    assert np.all(np.abs(X[:, sys.sphere_dim :]) <= 0.5)
    np.testing.assert_array_equal(X, sample_manifold(sys, 500, rate_box=0.5, seed=4))


def test_projection_is_idempotent():
    sys = build_example2()
    X = sample_manifold(sys, 10, seed=1) + 1e-3
    P = project_to_manifold(sys, X)
    np.testing.assert_allclose(project_to_manifold(sys, P), P, atol=1e-15)
    assert np.max(np.abs(CompiledPolys([sys.h])(P))) <= 1e-12


def test_non_sphere_constraint_rejected():
    sys = circle_toy_system()
    bad = replace(sys, h=sys.h + Polynomial.monomial((1, 1), 0.5))
    with pytest.raises(UnsupportedConstraint):
        sample_manifold(bad, 3)


def test_rk4_matches_closed_form():
    sys = circle_toy_system()
    th0 = 1.0
    tr = simulate(sys, [math.cos(th0) - 1.0, math.sin(th0)], 0.01, 3.0)
    th = np.arctan2(tr.states[:, 1], tr.states[:, 0] + 1.0)
    exact = 2.0 * np.arctan(math.tan(th0 / 2.0) * np.exp(-tr.times))
    assert np.max(np.abs(th - exact)) <= 1e-9
    assert tr.max_drift <= 1e-12


def test_simulate_rejects_bad_input():
    sys = circle_toy_system()
    with pytest.raises(ValueError):
        simulate(sys, [0.5, 0.5], 0.1, 1.0)  # off the circle
    with pytest.raises(ValueError):
        simulate(sys, [0.0, 0.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        simulate(sys, [0.0, 0.0, 0.0], 0.1, 1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_raises_integration_error():
    sys = circle_toy_system()
    fast = replace(sys, f=type(sys.f)([fi * 1e200 for fi in sys.f]))
    with pytest.raises(IntegrationError):
        simulate(fast, [math.cos(2.0) - 1.0, math.sin(2.0)], 1.0, 10.0)


def test_batch_agrees_with_single_runs(circle):
    sys, cert = circle
    X0 = sample_manifold(sys, 4, seed=3)
    res = simulate_batch(sys, X0, 0.05, 5.0, cert)
    for i, x0 in enumerate(X0):
        np.testing.assert_allclose(res.final[i], simulate(sys, x0, 0.05, 5.0).states[-1], atol=1e-14)
    assert res.increases.sum() == 0


def test_v_nonincreasing_and_converges(circle):
    sys, cert = circle
    tr = simulate(sys, [math.cos(3.0) - 1.0, math.sin(3.0)], 0.1, 30.0)
    vs = v_along_trajectory(cert, tr)
    assert vs.monotone
    assert vs.final_norm <= 1e-3


def test_certificate_passes_sampled_checks(circle):
    sys, cert = circle
    rep = check_conditions(cert, sys, sample_manifold(sys, 2000, seed=0))
    rep.secondary_instability = instability_summary(sys)
    assert rep.passed, rep.verdicts
    d = json.loads(rep.to_json())
    assert d["passed"] and d["secondary_instability"]["equilibria"][0]["n_positive_real"] == 1


def test_tampered_certificate_is_caught(circle):
    sys, cert = circle
    bad = LyapunovCertificate.from_json(cert.to_json())
    # V -> V - c x2^2 breaks positivity near theta = pi/2 and the SOS identity
    bad.V = bad.V - Polynomial.monomial((0, 2), 10.0 * bad.V.max_abs_coeff())
    rep = check_conditions(bad, sys, sample_manifold(sys, 2000, seed=0))
    assert not rep.passed
    assert not rep.verdicts["positivity"]
    assert not rep.verdicts["identity"]


def test_dimension_mismatch_rejected(circle):
    _, cert = circle
    with pytest.raises(ValueError):
        check_conditions(cert, build_example2(), np.zeros((3, 7)))
