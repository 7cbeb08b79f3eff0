import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hypoheat.fields import example
from hypoheat.kernel import euclidean_kernel
from hypoheat.semigroup import DownstairsGrid, GridUnsupported, Semigroup, phi_weights


@pytest.fixture(scope="module")
def grushin_grid():
    return DownstairsGrid(example("grushin"), [4.0, 8.0], active_nodes=65, passive_nodes=(64,))


def evolve(grid, A, u, t):
    sg = Semigroup(grid, A)
    return grid.to_physical(sg.evolve(grid.to_spectral(u), t))


def test_layout_and_roundtrip(grushin_grid):
    g = grushin_grid
    assert g.active == [0] and g.passive == [1]
    assert g.shape == (65, 64)
    u = np.random.default_rng(0).normal(size=g.shape)
    np.testing.assert_allclose(g.to_physical(g.to_spectral(u)), u, atol=1e-12)


def test_delta_snaps_to_node(grushin_grid):
    u, node = grushin_grid.delta([0.01, 0.49])
    assert grushin_grid.integrate(u) == pytest.approx(1.0)
    assert node[0] in grushin_grid.axes[0] and node[1] in grushin_grid.axes[1]


def test_mass_and_constants_are_conserved(grushin_grid):
    A = np.array([[1.3, 0.2], [0.2, 0.7]])
    u, _ = grushin_grid.delta([0.0, 0.5])
    v = evolve(grushin_grid, A, u, 0.5)
    assert grushin_grid.integrate(v) == pytest.approx(1.0, abs=1e-10)
    one = evolve(grushin_grid, A, np.ones(grushin_grid.shape), 0.7)
    np.testing.assert_allclose(one, 1.0, atol=1e-10)


def test_euclidean_semigroup_matches_gaussian():
    # both coordinates are passive for X_i = d_i: the semigroup is the exact periodic symbol
    grid = DownstairsGrid(example("euclidean"), [8.0, 8.0], passive_nodes=(128,))
    A = np.array([[1.5, 0.3], [0.3, 0.8]])
    u, node = grid.delta([0.0, 0.0])
    v = evolve(grid, A, u, 0.5)
    pts = np.array([[0.5, 0.25], [1.0, -0.5], [0.0, 1.0]])
    np.testing.assert_allclose(grid.interpolate(v, pts), euclidean_kernel(A, 0.5, pts, 0.0, node[None]),
                               rtol=2e-3)


def test_second_derivative_bands_sum_to_operator(grushin_grid):
    A = np.array([[1.3, 0.2], [0.2, 0.7]])
    d, up = grushin_grid.form(A)
    Q = grushin_grid.second_derivatives
    s = grushin_grid.to_spectral(np.random.default_rng(1).normal(size=grushin_grid.shape))
    total = sum((1.0 if i == j else 2.0) * A[i, j] * grushin_grid.apply_banded(Q[(i, j)], s) for (i, j) in Q)
    np.testing.assert_allclose(total, -grushin_grid.apply_banded((d, up), s), atol=1e-9)


def test_two_active_coordinates_are_rejected():
    with pytest.raises(GridUnsupported):
        DownstairsGrid(example("chain3"), [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        DownstairsGrid(example("grushin"), [1.0, 1.0], active_nodes=64)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 2.0), st.floats(1e-3, 2.0), st.floats(-2, 2), st.floats(-2, 2))
def test_phi_weights_match_quadrature(w, gap, L, g0, g1):
    F0, F1 = phi_weights(np.array([w]), gap, L)
    exact, _ = integrate.quad(lambda u: math.exp(-(gap + L - u) * w) * ((1 - u / L) * g0 + u / L * g1), 0, L,
                              epsabs=1e-13, epsrel=1e-11)
    assert F0[0] * g0 + F1[0] * g1 == pytest.approx(exact, rel=1e-7, abs=1e-12)
