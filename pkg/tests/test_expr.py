import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.expr import ExpressionError, parse_expression


def ev(text, t=0.0, x=(0.0, 0.0)):
    return float(parse_expression(text, len(x))(t, np.asarray(x, float)))


def test_precedence():
    assert ev("1 + 2 * 3") == 7
    assert ev("(1 + 2) * 3") == 9
    assert ev("8 / 4 / 2") == 1
    assert ev("10 - 4 - 3") == 3


def test_power_is_right_associative_and_binds_tighter_than_minus():
    assert ev("2^3^2") == 512
    assert ev("2**3**2") == 512
    assert ev("-x1^2", x=(3.0, 0.0)) == -9
    assert ev("(-x1)^2", x=(3.0, 0.0)) == 9


def test_functions_constants_and_variables():
    assert ev("1 + 0.2*sin(x2)", x=(0.0, math.pi / 2)) == pytest.approx(1.2)
    assert ev("exp(t) * cos(pi)", t=1.0) == pytest.approx(-math.e)
    assert ev("sqrt(abs(x1))", x=(-4.0, 0.0)) == pytest.approx(2.0)
    assert ev("1e-3 + .5") == pytest.approx(0.501)


def test_variable_sets():
    e = parse_expression("1 + 0.2*sin(x2)", 2)
    assert e.variables == {"x2"}
    assert not e.is_constant
    assert parse_expression("2*pi", 2).is_constant
    assert parse_expression("t*x1", 2).variables == {"t", "x1"}


def test_broadcast_evaluation():
    e = parse_expression("t + x1*x2", 2)
    x = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 5.0]])
    np.testing.assert_allclose(e(0.5, x), [2.5, 12.5, 0.5])
    np.testing.assert_allclose(e(np.array([0.0, 1.0, 2.0]), x), [2.0, 13.0, 2.0])


@pytest.mark.parametrize("text", ["x3", "1 +", "(1", "foo(1)", "1 2", "sin 1", "y", "1 $ 2", ""])
def test_errors(text):
    with pytest.raises(ExpressionError):
        parse_expression(text, 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3))
def test_matches_python_arithmetic(a, b, c):
    got = ev("x1*x2 - x1/3 + x2^2*t", t=c, x=(a, b))
    assert got == pytest.approx(a * b - a / 3 + b ** 2 * c, rel=1e-12, abs=1e-12)
