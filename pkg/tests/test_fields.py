import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.fields import (
    BadDilation,
    DependentFields,
    NonHomogeneous,
    RankDeficientAtZero,
    VectorField,
    bracket,
    example,
    generate_algebra,
    hoermander_rank,
    load_field_system,
    parse_field_system,
    random_rational_points,
)
from hypoheat.polynomial import Polynomial

GRUSHIN_SPEC = {
    "n": 2, "m": 2, "sigma": [1, 2],
    "fields": [
        {"coeffs": [{"var": 0, "poly": [{"exps": [0, 0], "num": 1, "den": 1}]}]},
        {"coeffs": [{"var": 1, "poly": [{"exps": [1, 0], "num": 1, "den": 1}]}]},
    ],
}


# frozen algebra data: (N, layer dims, p, step, q)
ALGEBRAS = {
    "euclidean": (2, [2], 0, 1, 2),
    "grushin": (3, [2, 1], 1, 2, 3),
    "grushin2": (4, [2, 1, 1], 2, 3, 4),
    "chain3": (4, [2, 1, 1], 1, 3, 6),
    "power3": (4, [2, 1, 1], 1, 3, 6),
    "power4": (5, [2, 1, 1, 1], 1, 4, 10),
}


@pytest.mark.parametrize("name", sorted(ALGEBRAS))
def test_algebra_dimensions(name):
    alg = generate_algebra(example(name))
    assert (alg.N, alg.layer_dims, alg.p, alg.step, alg.system.q) == ALGEBRAS[name]
    assert alg.jacobi_defect() == 0
    assert alg.grading_ok()


def test_power3_brackets():
    X1, X2 = example("power3").fields
    b = bracket(X1, X2)
    x0 = Polynomial.variable(3, 0)
    assert b == VectorField((Polynomial.zero(3), Polynomial.constant(3, 1), 2 * x0))
    assert bracket(X2, b).is_zero()
    assert bracket(X1, bracket(X1, b)).is_zero()


def test_words_are_right_nested():
    assert generate_algebra(example("grushin2")).words == [(0,), (1,), (0, 1), (0, 0, 1)]
    assert generate_algebra(example("chain3")).words == [(0,), (1,), (0, 1), (1, 0, 1)]


def test_hoermander_rank_on_random_points():
    S = example("power4")
    alg = generate_algebra(S)
    pts = [[0] * 4] + random_rational_points(4, 30, seed=3)
    assert all(hoermander_rank(S, p, alg) == 4 for p in pts)


def test_parse_roundtrip_formats(tmp_path):
    S = parse_field_system(GRUSHIN_SPEC)
    assert S.sigma == (1, 2)
    (tmp_path / "g.json").write_text(json.dumps(GRUSHIN_SPEC))
    toml = (
        'n = 2\nm = 2\nsigma = [1, 2]\n'
        '[[fields]]\ncoeffs = [{var = 0, poly = [{exps = [0, 0], num = 1, den = 1}]}]\n'
        '[[fields]]\ncoeffs = [{var = 1, poly = [{exps = [1, 0], num = 1, den = 1}]}]\n'
    )
    (tmp_path / "g.toml").write_text(toml)
    import yaml

    (tmp_path / "g.yaml").write_text(yaml.safe_dump(GRUSHIN_SPEC))
    for f in ("g.json", "g.toml", "g.yaml"):
        T = load_field_system(tmp_path / f)
        assert T.fields == S.fields


def test_validation_errors():
    bad = json.loads(json.dumps(GRUSHIN_SPEC))
    bad["sigma"] = [1, 1]
    with pytest.raises(NonHomogeneous):
        parse_field_system(bad)
    bad["sigma"] = [1]
    with pytest.raises(BadDilation):
        parse_field_system(bad)
    rank1 = {"n": 2, "m": 1, "sigma": [1, 1],
             "fields": [{"coeffs": [{"var": 0, "poly": [{"exps": [0, 0], "num": 1, "den": 1}]}]}]}
    with pytest.raises(RankDeficientAtZero, match="RankDeficientAtZero rank=1"):
        parse_field_system(rank1)
    dep = json.loads(json.dumps(GRUSHIN_SPEC))
    dep["fields"][1] = dep["fields"][0]
    with pytest.raises(DependentFields):
        parse_field_system(dep)


coeff = st.fractions(min_value=-3, max_value=3, max_denominator=4)


def _field(c):
    """A 1-homogeneous field for weights (1, 2, 3): c0 d1 + c1 x1 d2 + (c2 x2 + c3 x1^2) d3."""
    n = 3
    v = [Polynomial.variable(n, j) for j in range(n)]
    return VectorField((Polynomial.constant(n, c[0]), c[1] * v[0], c[2] * v[1] + c[3] * v[0] ** 2))


@settings(max_examples=40, deadline=None)
@given(st.lists(coeff, min_size=4, max_size=4), st.lists(coeff, min_size=4, max_size=4),
       st.lists(coeff, min_size=4, max_size=4))
def test_bracket_antisymmetry_and_jacobi(a, b, c):
    A, B, C = _field(a), _field(b), _field(c)
    assert (bracket(A, B) + bracket(B, A)).is_zero()
    jac = bracket(A, bracket(B, C)) + bracket(B, bracket(C, A)) + bracket(C, bracket(A, B))
    assert jac.is_zero()
    # brackets of 1-homogeneous fields are 2-homogeneous
    assert bracket(A, B).is_homogeneous([1, 2, 3], 2)
