from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.fields import example
from hypoheat.lift import (
    bch_product,
    build_lift,
    dynkin_coefficients,
    exp_flow,
    flow_commutation_error,
    flow_polynomials,
    lift_function,
)

Q_VALUES = {"euclidean": 2, "grushin": 4, "grushin2": 7, "chain3": 7, "power3": 7, "power4": 11}


@pytest.fixture(scope="module")
def lifts():
    return {name: build_lift(example(name)) for name in Q_VALUES}


@pytest.mark.parametrize("name", sorted(Q_VALUES))
def test_homogeneous_dimension(lifts, name):
    L = lifts[name]
    assert L.Q == Q_VALUES[name]
    assert L.Q == L.q + sum(L.s)
    assert L.check_projection()
    assert L.check_field_homogeneity()
    assert L.check_dilation_automorphism()


def test_grushin_group_law_frozen(grushin_lift):
    L = grushin_lift
    assert L.multiply_exact([F(1), F(2), F(3)], [F(4), F(5), F(6)]) == [5, 13, 9]
    assert L.inv_exact([F(1), F(2), F(3)]) == [-1, 1, -3]
    assert [str(f) for f in L.lifted_fields] == ["(1)*d0", "(z0)*d1 + (1)*d2"]


def test_power3_lift_frozen(lifts):
    L = lifts["power3"]
    assert [str(f) for f in L.lifted_fields] == ["(1)*d0", "(z0)*d1 + (z0^2)*d2 + (1)*d3"]
    assert L.multiply_exact([F(1), F(1, 2), F(2), F(-1)], [F(3), F(0), F(1), F(2)]) == [4, F(5, 2), 5, 1]


def test_dynkin_low_order():
    c = dynkin_coefficients(3)
    # log(e^X e^Y) = X + Y + [X,Y]/2 + [X,[X,Y]]/12 + [Y,[Y,X]]/12 + ...
    assert c[(0,)] == 1 and c[(1,)] == 1
    assert c[(0, 1)] - c[(1, 0)] == F(1, 2)
    assert c[(0, 0, 1)] - c[(0, 1, 0)] == F(1, 12)
    assert c[(1, 1, 0)] - c[(1, 0, 1)] == F(1, 12)


@pytest.mark.parametrize("name", ["grushin", "power3", "power4"])
def test_group_axioms_on_rational_samples(lifts, name):
    L = lifts[name]
    rng = np.random.default_rng(7)
    pts = [[F(int(v), 3) for v in rng.integers(-6, 7, L.N)] for _ in range(40)]
    triples = list(zip(pts, pts[1:], pts[2:]))
    assert L.check_identity_inverse(pts) == 0
    assert L.check_associativity(triples) == 0
    assert L.check_left_invariance(list(zip(pts, pts[1:]))) == 0


@pytest.mark.parametrize("name", ["grushin", "chain3", "power4"])
def test_flow_commutes_with_projection(lifts, name):
    assert flow_commutation_error(lifts[name], samples=20) < 1e-8


def test_exact_flow_polynomials_match_rk4(lifts):
    L = lifts["power3"]
    X2 = L.lifted_fields[1]
    polys = flow_polynomials(X2, L.exponents)
    z = np.array([0.3, -0.2, 0.5, 1.0])
    t = 0.7
    exact = np.array([p.evaluate(np.append(z, t)[None])[0] for p in polys])
    np.testing.assert_allclose(exact, exp_flow(X2, z, t), atol=1e-10)
    # x1 is constant along X2, so the flow is linear/quadratic in t
    np.testing.assert_allclose(exact, [0.3, -0.2 + 0.3 * t, 0.5 + 0.09 * t, 1.0 + t], atol=1e-14)


def test_lift_function(grushin_lift):
    u = lambda t, x: t + x[..., 0] * x[..., 1]  # noqa: E731
    v = lift_function(u, 2)
    z = np.array([[1.0, 2.0, 5.0], [0.5, 0.5, -1.0]])
    np.testing.assert_allclose(v(1.0, z), [3.0, 1.25])


rat = st.fractions(min_value=-4, max_value=4, max_denominator=5)


@settings(max_examples=40, deadline=None)
@given(st.lists(rat, min_size=9, max_size=9))
def test_grushin_associativity_property(vals):
    L = build_lift(example("grushin"))
    a, b, c = vals[:3], vals[3:6], vals[6:]
    assert L.multiply_exact(L.multiply_exact(a, b), c) == L.multiply_exact(a, L.multiply_exact(b, c))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=8, max_size=8), st.floats(0.1, 3.0))
def test_dilations_are_automorphisms(vals, lam):
    L = build_lift(example("power3"))
    a, b = np.array(vals[:4]), np.array(vals[4:])
    lhs = L.dilate(lam, L.multiply(a, b))
    rhs = L.multiply(L.dilate(lam, a), L.dilate(lam, b))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-9)
