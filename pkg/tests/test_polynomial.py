from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.exact import SparseEchelon, inverse, rank
from hypoheat.polynomial import Polynomial, PolyMap

x = Polynomial.variable(2, 0)
y = Polynomial.variable(2, 1)


def test_arithmetic_and_printing():
    p = (x + 2 * y) ** 2
    assert p == x * x + 4 * x * y + 4 * y * y
    assert p(1, 1) == 9
    assert p(Fraction(1, 2), Fraction(1, 3)) == Fraction(49, 36)
    assert (p - p).is_zero()
    assert p.degree() == 2


def test_diff_and_homogeneity():
    p = x ** 3 * y + 5 * y ** 2
    assert p.diff(0) == 3 * x ** 2 * y
    assert p.diff(1) == x ** 3 + 10 * y
    # weights (1, 2): x^3 y has degree 5, y^2 degree 4
    assert not p.is_homogeneous([1, 2], 5)
    assert (x ** 3 * y).is_homogeneous([1, 2], 5)
    assert p.variables() == {0, 1}


def test_substitute_and_extend():
    p = x * y + 1
    q = p.substitute([y, x + y])
    assert q == y * (x + y) + 1
    e = p.extend(4, offset=1)
    assert e.nvars == 4 and e(0, 2, 3, 0) == 7


def test_vectorised_evaluation_matches_exact():
    p = x ** 2 * y - Fraction(1, 3) * y + 7
    pts = np.array([[0.5, -1.0], [2.0, 3.0], [0.0, 0.0]])
    exact = [float(p(Fraction(a), Fraction(b))) for a, b in pts]
    np.testing.assert_allclose(p.evaluate(pts), exact, rtol=1e-15)
    pm = PolyMap([p, x + y])
    np.testing.assert_allclose(pm(pts)[:, 0], exact, rtol=1e-15)


def test_json_roundtrip():
    p = Fraction(3, 7) * x ** 2 * y - y + 2
    assert Polynomial.from_json(2, p.to_json()) == p


def test_exact_linear_algebra():
    M = [[2, 1], [1, 1]]
    assert inverse(M) == [[1, -1], [-1, 2]]
    assert rank([[1, 2, 3], [2, 4, 6], [0, 1, 1]]) == 2
    ech = SparseEchelon()
    assert ech.add({"a": Fraction(1), "b": Fraction(2)})
    assert not ech.add({"a": Fraction(2), "b": Fraction(4)})
    assert ech.express({"a": Fraction(3), "b": Fraction(6)}) == [Fraction(3)]


small = st.integers(-4, 4)
polys = st.lists(st.tuples(small, st.integers(0, 3), st.integers(0, 3)), max_size=4).map(
    lambda terms: sum((c * x ** a * y ** b for c, a, b in terms), Polynomial.zero(2)))


@settings(max_examples=60, deadline=None)
@given(polys, polys, polys)
def test_ring_laws(p, q, r):
    assert p * q == q * p
    assert (p * q) * r == p * (q * r)
    assert p * (q + r) == p * q + p * r


@settings(max_examples=60, deadline=None)
@given(polys, polys)
def test_leibniz_rule(p, q):
    for i in range(2):
        assert (p * q).diff(i) == p.diff(i) * q + p * q.diff(i)
