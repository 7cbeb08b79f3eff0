import math

import numpy as np
import pytest

from hypoheat.fields import example
from hypoheat.harnack import (
    CenterValueZero,
    GridCaloric,
    HarnackBox,
    SolverDiverged,
    caloric_grid,
    control_endpoint,
    euclidean_harnack_oracle,
    lifted_waiting_sup,
    merge_reports,
    parabolic_harnack_check,
    pole_family,
    stationary_harnack_check,
)
from hypoheat.lift import build_lift


def box(x0=(0.0, 0.0), r=1.0):
    return HarnackBox(1.0, 0.3, 0.6, 0.5, 0.0, x0, r)


def heat(s, y):
    y = np.asarray(y, float)
    return lambda t, X: np.exp(-np.sum((X - y) ** 2, -1) / (4 * (t - s))) / (4 * math.pi * (t - s))


def test_box_validation():
    with pytest.raises(ValueError):
        HarnackBox(1.0, 0.6, 0.3, 0.5, 0.0, [0, 0], 1.0)
    with pytest.raises(ValueError):
        HarnackBox(1.0, 0.3, 0.6, 1.0, 0.0, [0, 0], 1.0)
    with pytest.raises(ValueError):
        HarnackBox(1.0, 0.3, 0.6, 0.5, 0.0, [0, 0], 2.0)
    b = box().scaled(0.5)
    assert b.waiting_times == pytest.approx((-0.15, -0.075))
    assert b.to_json()["r"] == 0.5


def test_constant_solution_has_ratio_one(euclid_oracle):
    rep = parabolic_harnack_check(lambda t, X: np.ones(len(X)), box(), euclid_oracle, samples=100)
    assert rep.ratios == [1.0] and rep.M_hat == 1.0


def test_zero_center_value_is_rejected(euclid_oracle):
    with pytest.raises(CenterValueZero):
        parabolic_harnack_check(lambda t, X: np.zeros(len(X)), box(), euclid_oracle, samples=100)


@pytest.mark.parametrize("y", [[1.5, 0.0], [0.8, -1.2], [0.0, 0.0]])
def test_euclidean_heat_kernel_matches_oracle(euclid_oracle, y):
    b = box()
    rep = parabolic_harnack_check(heat(-1.0, y), b, euclid_oracle, samples=400)
    assert rep.ratios[0] == pytest.approx(euclidean_harnack_oracle(b, -1.0, y), rel=0.02)
    # the sampled sup never exceeds the true sup
    assert rep.ratios[0] <= euclidean_harnack_oracle(b, -1.0, y) * (1 + 1e-9)


def test_translation_covariance(euclid_oracle):
    shift = np.array([2.0, -1.0])
    a = parabolic_harnack_check(heat(-1.0, [1.5, 0.0]), box(), euclid_oracle, samples=200)
    b = parabolic_harnack_check(heat(-1.0, shift + [1.5, 0.0]), box(x0=shift), euclid_oracle, samples=200)
    assert a.ratios[0] == pytest.approx(b.ratios[0], rel=1e-2)


@pytest.mark.parametrize("rho", [0.5, 1.5, 3.0])
def test_oracle_against_brute_force(rho):
    b = box()
    u = heat(-1.0, [rho, 0.0])
    g = np.linspace(-b.gamma, b.gamma, 201)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    X = X[np.linalg.norm(X, axis=1) <= b.gamma]
    ta, tb = b.waiting_times
    sup = max(u(t, X).max() for t in np.linspace(ta, tb, 201))
    brute = sup / u(0.0, np.zeros((1, 2)))[0]
    assert euclidean_harnack_oracle(b, -1.0, [rho, 0.0]) == pytest.approx(brute, rel=2e-3)


def test_grid_caloric_is_positive_and_conserves_mass(grushin, grushin_oracle):
    grid = caloric_grid(grushin, grushin_oracle, [0.0, 0.0], 4.0, active_nodes=65, passive_nodes=(128,))
    u = GridCaloric(grid, np.eye(2), -1.0, [1.2, 0.3])
    assert grid.integrate(u.grid_values(0.0)) == pytest.approx(1.0, abs=1e-9)
    assert u(-1.0, np.zeros((1, 2)))[0] == 0.0
    assert u(0.0, np.zeros((1, 2)))[0] > 0


def test_control_endpoint(grushin_oracle):
    # X1 = d1 moves the first coordinate only
    np.testing.assert_allclose(control_endpoint(grushin_oracle, [0.0, 0.0], [2.0, 0.0], 1.5), [1.5, 0.0],
                               atol=1e-12)
    # a straight control of length L is admissible, so d(x, endpoint) <= L
    y = control_endpoint(grushin_oracle, [0.2, 0.1], [0.6, 0.8], 1.3)
    assert grushin_oracle.distance([0.2, 0.1], y)[0] <= 1.3 * (1 + 1e-6)


def test_grushin_family_finite_ratios(grushin, grushin_oracle):
    fam = pole_family(grushin, grushin_oracle, [0.0, 0.0], 1.0, count=2, active_nodes=65,
                      passive_nodes=(128,))
    rep = merge_reports([parabolic_harnack_check(u, box(), grushin_oracle, samples=200) for u in fam])
    assert len(rep.ratios) == 2
    assert np.all(np.isfinite(rep.ratios)) and rep.M_hat >= 1.0
    assert rep.to_json()["M_hat"] == rep.M_hat


def test_lifted_sup_is_consistent(euclid_oracle):
    lift = build_lift(example("euclidean"))
    u = heat(-1.0, [1.5, 0.0])
    b = box()
    center = u(np.array([0.0]), np.zeros((1, 2)))[0]
    lifted = lifted_waiting_sup(u, lift, b, count=4000, times=17) / center
    exact = euclidean_harnack_oracle(b, -1.0, [1.5, 0.0])
    # sampling only undershoots the sup
    assert 0.9 * exact <= lifted <= exact * (1 + 1e-9)


def test_stationary_constant_data(grushin, grushin_oracle):
    out = stationary_harnack_check(grushin, grushin_oracle, [0.5, 0.0], 0.5, lambda X: np.ones(len(X)),
                                   resolution=33)
    assert out["ratio"] == pytest.approx(1.0, abs=1e-9)
    assert out["residual"] < 1e-8


def test_stationary_euclidean_poisson_control(euclid, euclid_oracle):
    # harmonic extension of 1 + cos(theta)/2 from |x| = 3 is 1 + rho cos(theta)/6
    data = lambda X: 1 + 0.5 * np.cos(np.arctan2(X[..., 1], X[..., 0]))  # noqa: E731
    out = stationary_harnack_check(euclid, euclid_oracle, [0.0, 0.0], 1.0, data, resolution=65)
    assert out["ratio"] == pytest.approx((1 + 1 / 6) / (1 - 1 / 6), rel=0.03)


def test_stationary_methods_agree(grushin, grushin_oracle):
    data = lambda X: 1 + 0.5 * np.cos(X[..., 0] + 2 * X[..., 1])  # noqa: E731
    a = stationary_harnack_check(grushin, grushin_oracle, [0.5, 0.0], 0.5, data, resolution=25)
    b = stationary_harnack_check(grushin, grushin_oracle, [0.5, 0.0], 0.5, data, resolution=25,
                                 method="fixed-point")
    assert b["iterations"] > 0
    assert a["ratio"] == pytest.approx(b["ratio"], rel=1e-5)
    with pytest.raises(SolverDiverged):
        stationary_harnack_check(grushin, grushin_oracle, [0.5, 0.0], 0.5, data, resolution=25,
                                 method="fixed-point", max_iter=10)
    with pytest.raises(ValueError):
        stationary_harnack_check(grushin, grushin_oracle, [0.5, 0.0], 0.5, data, resolution=25, method="cg")
