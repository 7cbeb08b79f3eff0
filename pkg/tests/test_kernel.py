import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoheat.bounds import rng_for
from hypoheat.fields import example
from hypoheat.kernel import (
    EllipticMatrix,
    FieldFlows,
    FrozenKernelCache,
    GridConfig,
    KernelError,
    NotElliptic,
    ProjectedKernel,
    apply_operator_fd,
    euclidean_kernel,
    kernel_probes,
    mass,
    pde_residual,
    random_elliptic,
    read_hypk,
    residual_admissible,
    solve_lifted_kernel,
    verify_reproduction,
    verify_scaling_law,
    write_hypk,
)
from hypoheat.lift import build_lift
from oracles import grushin_lift_kernel, grushin_lift_kernel_A, mehler


# -- elliptic matrices ---------------------------------------------------------------

def test_elliptic_matrix_validation():
    with pytest.raises(NotElliptic):
        EllipticMatrix(np.array([[1.0, 0.5], [0.0, 1.0]]), 4.0)
    with pytest.raises(NotElliptic):
        EllipticMatrix(np.array([[1.0, 0.0], [0.0, -1.0]]), 4.0)
    with pytest.raises(NotElliptic):
        EllipticMatrix(np.diag([1.0, 5.0]), 4.0)
    with pytest.raises(NotElliptic):
        EllipticMatrix(np.ones(3), 4.0)
    A = EllipticMatrix.from_array([[2.0, 0.0], [0.0, 0.5]])
    assert A.Lambda == pytest.approx(2.0)


def test_elliptic_sqrt():
    A = EllipticMatrix(np.array([[2.0, 0.5], [0.5, 1.0]]), 4.0)
    S = A.sqrt
    np.testing.assert_allclose(S @ S, A.entries, atol=1e-12)
    np.testing.assert_allclose(S, S.T, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.5, 4.0, 10.0]), st.integers(1, 4))
def test_random_elliptic_spectrum(seed, Lam, m):
    A = random_elliptic(m, Lam, rng_for(seed, "elliptic"))
    ev = A.eigenvalues
    assert ev.min() >= 1 / Lam * (1 - 1e-9) and ev.max() <= Lam * (1 + 1e-9)


# -- reference formulas ----------------------------------------------------------------

def test_mehler_reduces_to_heat_kernel():
    x, y, t = 0.3, -0.2, 0.7
    heat = math.exp(-(x - y) ** 2 / (4 * t)) / math.sqrt(4 * math.pi * t)
    assert mehler(1e-9, t, x, y) == pytest.approx(heat, rel=1e-6)


def test_grushin_lift_kernel_at_origin():
    # gamma(t, 0) = 1 / (16 t^2) for X1 = d_0, X2 = z_0 d_1 + d_2
    for t in (0.5, 1.0):
        assert grushin_lift_kernel(t, [0.0, 0.0, 0.0]) == pytest.approx(1 / (16 * t * t), rel=1e-3)


def test_euclidean_closed_form_mass_and_covariance():
    A = np.array([[1.5, 0.3], [0.3, 0.8]])
    g = np.linspace(-8, 8, 321)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    vals = euclidean_kernel(A, 0.5, pts, 0.0, np.zeros((1, 2)))
    cell = (g[1] - g[0]) ** 2
    assert vals.sum() * cell == pytest.approx(1.0, rel=1e-6)
    cov = (pts[:, :, None] * pts[:, None, :] * vals[:, None, None]).sum(0) * cell
    np.testing.assert_allclose(cov, 2 * 0.5 * A, atol=1e-6)
    assert euclidean_kernel(A, 0.0, pts[:2], 0.0, np.zeros((1, 2))).tolist() == [0.0, 0.0]


# -- lifted and projected Grushin kernel (test resolution) ----------------------------

def test_lifted_grushin_kernel_matches_mehler(grushin_kernel):
    lk = grushin_kernel.lk
    for z in ([0.0, 0.0, 0.0], [0.5, 0.2, -0.3], [1.0, 0.0, 0.5]):
        for t in (0.5, 1.0):
            assert lk(t, np.array(z)) == pytest.approx(grushin_lift_kernel(t, z), rel=5e-3)


def test_lifted_mass_and_edges(grushin_kernel):
    lk = grushin_kernel.lk
    for k in range(len(lk.levels)):
        assert lk.mass(k) == pytest.approx(1.0, abs=1e-5)
    assert lk.edge_mass(len(lk.levels) - 1) < 1e-3
    assert lk(0.0, np.zeros(3)) == 0.0


def test_level_policy(grushin_kernel):
    lk = grushin_kernel.lk
    top = int(np.argmax(lk.levels))
    assert lk.level_for(np.array([0.1, 0.3, 2.0])).tolist() == [top] * 3
    assert lk.nearest_level(0.26) == lk.levels.index(0.25)
    h = lk.spacing_scale(0.25)
    # coarsest weight-one axis, seen through the dilation from t = 1 to t = 1/4
    ex = np.asarray(lk.lift.exponents)
    assert h == pytest.approx(lk.spacing[ex == 1].max() * 0.5)


def test_projected_kernel_mass_symmetry_reproduction(grushin_kernel):
    pk = grushin_kernel
    x = np.array([[0.3, 0.1], [1.0, -0.5]])
    y = np.array([[0.0, 0.0], [0.5, 0.2]])
    np.testing.assert_allclose(mass(pk, 1.0, 0.0, x), 1.0, atol=1e-3)
    np.testing.assert_allclose(mass(pk, 1.0, 0.0, x, over="x"), 1.0, atol=1e-3)
    # sum X_i^2 is symmetric: Gamma(t, x; 0, y) = Gamma(t, y; 0, x)
    np.testing.assert_allclose(pk(1.0, x, 0.0, y), pk(1.0, y, 0.0, x), rtol=1e-3)
    np.testing.assert_allclose(pk(1.0, x, 0.0, y), [0.15908551, 0.07249453], rtol=1e-6)
    assert verify_reproduction(pk, 1.0, 0.5, 0.0, [[1.0, 0.5]], [[0.0, 0.0]]) < 1e-3
    assert pk(0.0, x, 0.0, y).tolist() == [0.0, 0.0]


def test_scaling_law_compares_independent_levels(grushin_kernel):
    pk = grushin_kernel
    x = np.array([[0.3, 0.1], [1.0, -0.5]])
    y = np.array([[0.0, 0.0], [0.5, 0.2]])
    err = verify_scaling_law(pk, 3, 2.0, [0.25, 0.25], x, y)
    assert 0.0 < err < 0.02
    # the wrong homogeneous dimension is detected
    assert verify_scaling_law(pk, 4, 2.0, [0.25], x[:1], y[:1]) > 0.9


def test_residual_small_away_from_pole(grushin_kernel, grushin_oracle):
    pk = grushin_kernel
    tau, x, y = kernel_probes(grushin_oracle, [0.25, 0.5, 1.0], 6, seed=1)
    d = grushin_oracle.distances(x, y).d
    ok = residual_admissible(pk, tau, d)
    assert 0 < ok.sum() <= len(ok)
    res = pde_residual(pk, np.eye(2), tau[ok], x[ok], y[ok])
    assert res.max() < 0.1
    assert res.mean() < 0.02


def test_residual_richardson_on_exact_kernel(euclid):
    # closed-form Gaussian: the extrapolated residual removes the O(h^2) error
    class Exact:
        lift = type("L", (), {"system": euclid})()

        def __call__(self, t, x, s, y):
            return euclidean_kernel(np.eye(2), t, x, s, y)

    tau = np.array([0.25, 1.0])
    x = np.array([[1.2, 0.4], [2.5, -1.0]])
    y = np.zeros((2, 2))
    plain = pde_residual(Exact(), np.eye(2), tau, x, y, hfrac=1 / 10, richardson=False)
    extra = pde_residual(Exact(), np.eye(2), tau, x, y, hfrac=1 / 10)
    assert plain.max() > 1e-2
    assert extra.max() < min(plain.max() / 4, 5e-3)


# -- anisotropic coefficient matrices ------------------------------------------------

ANISO = np.array([[0.9, -1.3], [-1.3, 3.2]])


@pytest.fixture(scope="module")
def aniso_kernel(grushin_lift):
    cfg = GridConfig(active_nodes=97, passive_nodes=(256, 32))
    return ProjectedKernel(solve_lifted_kernel(grushin_lift, EllipticMatrix(ANISO, 4.0), cfg))


def test_lifted_kernel_matches_automorphism_oracle(aniso_kernel):
    lk = aniso_kernel.lk
    for z in ([0.0, 0.0, 0.0], [0.5, 0.2, -0.3], [-0.4, 0.3, 0.6]):
        for t in (0.5, 1.0):
            assert lk(t, np.array(z)) == pytest.approx(grushin_lift_kernel_A(ANISO, t, z), rel=2e-2)


def test_anisotropic_reproduction_and_mass(aniso_kernel):
    x = np.array([[1.0, 0.5], [0.0, 0.3]])
    y = np.array([[0.0, 0.0], [-0.5, 0.5]])
    assert verify_reproduction(aniso_kernel, 1.0, 0.5, 0.0, x, y) < 1e-2
    np.testing.assert_allclose(mass(aniso_kernel, 0.5, 0.0, x), 1.0, atol=2e-3)


def test_window_follows_coefficient_geometry(grushin_lift):
    from hypoheat.kernel import _box_half_widths

    base = _box_half_widths(grushin_lift, 2.0)
    np.testing.assert_array_equal(_box_half_widths(grushin_lift, 2.0, A=np.eye(2)), base)
    # a small a11 shrinks the weight-one active axis while the window still scales with A
    thin = _box_half_widths(grushin_lift, 2.0, A=np.diag([0.25, 1.0]))
    assert thin[0] == pytest.approx(0.5 * base[0], rel=1e-12)
    assert thin[2] == pytest.approx(base[2], rel=1e-12)


def test_fd_operator_on_polynomials(grushin):
    flows = FieldFlows(grushin)
    # X1 = d1, X2 = x1 d2:  X2^2 (x2^2) = 2 x1^2 and X1^2 (x1^3) = 6 x1
    x = np.array([[0.7, -0.4], [1.3, 0.9]])
    f = lambda p: p[:, 1] ** 2 + p[:, 0] ** 3  # noqa: E731
    got = apply_operator_fd(f, flows, np.eye(2), x, np.full(2, 1e-3))
    np.testing.assert_allclose(got, 2 * x[:, 0] ** 2 + 6 * x[:, 0], rtol=1e-5)
    g = lambda p: p[:, 0] * p[:, 1]  # noqa: E731
    # X1 X2 g = d1(x1 * x1) = 2 x1, X2 X1 g = x1 d2(x2) = x1
    got = apply_operator_fd(g, flows, np.array([[0.0, 0.5], [0.5, 0.0]]), x, np.full(2, 1e-3))
    np.testing.assert_allclose(got, 0.5 * (2 * x[:, 0] + x[:, 0]), rtol=1e-5)


def test_euclidean_lift_matches_closed_form(small_cfg):
    lift = build_lift(example("euclidean"))
    A = np.array([[1.5, 0.3], [0.3, 0.8]])
    pk = ProjectedKernel(solve_lifted_kernel(lift, EllipticMatrix(A, 4.0), small_cfg))
    x = np.array([[0.2, 0.1], [1.0, -0.4]])
    np.testing.assert_allclose(pk(0.5, x, 0.0, [[0.0, 0.0]]), euclidean_kernel(A, 0.5, x, 0.0, [[0.0, 0.0]]),
                               rtol=2e-3)


def test_kernel_rejects_wrong_size(grushin_lift, small_cfg):
    with pytest.raises(ValueError):
        solve_lifted_kernel(grushin_lift, EllipticMatrix(np.eye(3), 4.0), small_cfg)
    with pytest.raises(KernelError):
        solve_lifted_kernel(build_lift(example("power4")), EllipticMatrix(np.eye(2), 4.0), small_cfg)


def test_frozen_cache_reuses_kernels(grushin_lift, small_cfg):
    cache = FrozenKernelCache(grushin_lift, small_cfg)
    a = cache.get(np.eye(2))
    b = cache.get(np.eye(2) + 1e-9)
    assert a is b and len(cache) == 1


def test_hypk_roundtrip(tmp_path):
    v = np.arange(24, dtype=float).reshape(2, 3, 4) / 7
    write_hypk(tmp_path / "k.hypk", v, [0.1, 0.2, 0.3], [(-1, 1), (-2, 2), (0, 3)])
    raw = (tmp_path / "k.hypk").read_bytes()
    assert raw[:4] == b"HYPK"
    w, sp, ext = read_hypk(tmp_path / "k.hypk")
    np.testing.assert_array_equal(v, w)
    assert sp == [0.1, 0.2, 0.3] and ext == [(-1, 1), (-2, 2), (0, 3)]
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_hypk(tmp_path / "bad")
