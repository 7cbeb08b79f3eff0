import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.bounds import rng_for
from hypoheat.metric import (
    DegenerateBox,
    GaussianE,
    Gauge,
    MetricOracle,
    VolumeFunction,
    ball_box,
    ball_volume,
    exp_tail_integral,
    homogeneous_norm,
    parabolic_distance,
    volume_scaling_check,
)


@pytest.fixture(scope="module")
def grushin_gauge(grushin_oracle):
    return Gauge(grushin_oracle, resolution=33)


@pytest.fixture(scope="module")
def euclid_gauge(euclid_oracle):
    return Gauge(euclid_oracle, resolution=33)


def test_euclidean_distance_is_the_euclidean_norm(euclid_oracle):
    d, ok = euclid_oracle.distance([0.0, 0.0], [3.0, 4.0])
    assert ok and d == pytest.approx(5.0, rel=1e-9)
    d, _ = euclid_oracle.distance([1.0, -2.0], [0.5, 0.5])
    assert d == pytest.approx(math.hypot(0.5, 2.5), rel=1e-9)


def test_grushin_known_distances(grushin_oracle):
    # horizontal segments are geodesics
    assert grushin_oracle.distance([0.0, 0.0], [1.0, 0.0])[0] == pytest.approx(1.0, abs=1e-9)
    # d(0, (0, y)) = sqrt(2 pi |y|); the estimate is an upper bound within 1%
    d = grushin_oracle.distance([0.0, 0.0], [0.0, 1.0])[0]
    assert math.sqrt(2 * math.pi) <= d * (1 + 1e-9)
    assert d == pytest.approx(math.sqrt(2 * math.pi), rel=1e-2)
    # frozen estimate
    assert d == pytest.approx(2.510667210964372, rel=1e-6)


def test_grushin_homogeneity_and_symmetry(grushin_oracle):
    x = np.array([0.3, -0.7])
    d1 = grushin_oracle.distance([0.0, 0.0], x)[0]
    for lam in (0.5, 2.0, 4.0):
        dl = grushin_oracle.distance([0.0, 0.0], [lam * x[0], lam ** 2 * x[1]])[0]
        assert dl == pytest.approx(lam * d1, rel=1e-2)
    a, b = [0.5, 0.2], [1.0, -0.3]
    assert grushin_oracle.distance(a, b)[0] == pytest.approx(grushin_oracle.distance(b, a)[0], rel=1e-9)


def test_translation_invariance_in_passive_coordinate(grushin_oracle):
    d1 = grushin_oracle.distance([0.4, 0.0], [0.9, 0.6])[0]
    d2 = grushin_oracle.distance([0.4, 3.0], [0.9, 3.6])[0]
    assert d1 == pytest.approx(d2, rel=1e-6)


@settings(max_examples=8, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_triangle_inequality(grushin_oracle, coords):
    x, y, z = np.reshape(coords, (3, 2))
    dxy = grushin_oracle.distance(x, y)[0]
    dyz = grushin_oracle.distance(y, z)[0]
    dxz = grushin_oracle.distance(x, z)[0]
    assert dxz <= (dxy + dyz) * 1.02 + 1e-9


def test_parabolic_distance(euclid_oracle):
    assert parabolic_distance(euclid_oracle, (1.0, [0, 0]), (0.75, [3, 4])) == pytest.approx(5.5)


def test_homogeneous_norm_scales():
    x = np.array([[0.3, -0.7], [1.0, 2.0]])
    w = [1, 2]
    lam = 3.0
    np.testing.assert_allclose(homogeneous_norm(x * lam ** np.array(w), w), lam * homogeneous_norm(x, w))


def test_gauge_matches_oracle(grushin_oracle, grushin_gauge):
    pts = np.array([[0.0, 1.0], [1.0, 0.0], [0.3, -0.7], [-2.0, 1.5]])
    direct = grushin_oracle.distances(np.zeros_like(pts), pts).d
    np.testing.assert_allclose(grushin_gauge(pts), direct, rtol=1e-3)


def test_euclidean_ball_volume(euclid_oracle, euclid_gauge):
    v = ball_volume(euclid_oracle, [0.0, 0.0], 1.0, 20000, gauge=euclid_gauge)
    assert abs(v.volume - math.pi) < 3 * v.stderr
    assert v.boundary_hit_rate < 1e-3


def test_ball_volume_validation(euclid_oracle):
    with pytest.raises(ValueError):
        ball_volume(euclid_oracle, [0.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        ball_volume(euclid_oracle, [0.0, 0.0], 1.0, samples=10)
    with pytest.raises(DegenerateBox):
        ball_box(euclid_oracle, [0.0, 0.0], 1e-300)


def test_grushin_volume_scaling(grushin_oracle, grushin_gauge):
    r = volume_scaling_check(grushin_oracle, 1.0, 2.0, 20000, gauge=grushin_gauge)
    assert r["expected"] == 8.0
    assert r["z"] < 3.0


def test_ball_volume_is_deterministic(grushin_oracle, grushin_gauge):
    a = ball_volume(grushin_oracle, [0.0, 0.0], 1.0, 5000, seed=3, gauge=grushin_gauge)
    b = ball_volume(grushin_oracle, [0.0, 0.0], 1.0, 5000, seed=3, gauge=grushin_gauge)
    assert a.volume == b.volume and a.stderr == b.stderr


def test_gaussian_E_euclidean_closed_form(euclid_oracle, euclid_gauge):
    vf = VolumeFunction(euclid_oracle, nodes=3, samples=20000, gauge=euclid_gauge)
    E = GaussianE(euclid_oracle, vf)
    val = E([0.0, 0.0], [1.0, 0.0], 1.0)[0]
    assert val == pytest.approx(math.exp(-1) / math.pi, rel=0.02)
    # |B(x, sqrt t)| = pi t for every centre
    assert vf([5.0, -3.0], 2.0)[0] == pytest.approx(4 * math.pi, rel=0.02)
    with pytest.raises(ValueError):
        E([0.0, 0.0], [1.0, 0.0], 0.0)


def test_exp_tail_is_negligible(euclid_oracle, euclid_gauge):
    r = exp_tail_integral(euclid_oracle, [0.0, 0.0], samples=20000, gauge=euclid_gauge)
    # integral of exp(-|y|^2) over the plane is pi
    assert r["value"] == pytest.approx(math.pi, abs=4 * r["stderr"] + 1e-3)
    assert r["tail_bound"] < 1e-6


def test_rng_for_streams():
    a = rng_for(0, "ball", 3).random(4)
    b = rng_for(0, "ball", 3).random(4)
    c = rng_for(0, "ball", 4).random(4)
    d = rng_for(1, "ball", 3).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)
    np.testing.assert_allclose(rng_for(0, "a", 3).random(3), [0.56078389, 0.43955437, 0.73271611], rtol=1e-7)


def test_oracle_rejects_unknown_norm(grushin):
    with pytest.raises(ValueError):
        MetricOracle(grushin, norm="linf")
