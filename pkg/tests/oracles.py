"""Independent reference values used by the test-suite."""

import numpy as np


def mehler(omega, t, x, y):
    """Kernel of d/dt - d^2/dx^2 + omega^2 x^2 (omega -> 0 gives the heat kernel)."""
    w = np.maximum(np.abs(omega), 1e-12)
    s = np.sinh(2 * w * t)
    c = np.cosh(2 * w * t)
    return np.sqrt(w / (2 * np.pi * s)) * np.exp(-w * ((x ** 2 + y ** 2) * c - 2 * x * y) / (2 * s))


def grushin_lift_kernel(t, z, eta_max=200.0, zeta_max=40.0, n_eta=1601, n_zeta=401):
    """Kernel of X1^2 + X2^2 - d/dt on the group with X1 = d_0, X2 = z_0 d_1 + d_2.

    Fourier transform in (z_1, z_2) gives the shifted oscillator
    d^2/dz0^2 - (eta z0 + zeta)^2, solved by Mehler's formula.
    """
    z = np.asarray(z, dtype=float)
    eta = np.linspace(-eta_max, eta_max, n_eta)
    zeta = np.linspace(-zeta_max, zeta_max, n_zeta)
    E, Z = np.meshgrid(eta, zeta, indexing="ij")
    w = np.maximum(np.abs(E), 1e-12)
    # Mehler's formula at x = z0 + zeta/eta, y = zeta/eta, rearranged so that
    # eta -> 0 is regular: (x^2 + y^2) cosh - 2xy = (x - y)^2 cosh + 2xy (cosh - 1)
    coth = 1 / np.tanh(2 * w * t)
    th = np.tanh(w * t)
    ratio = np.where(w * t < 1e-6, t, th / w)
    expo = -w * z[0] ** 2 * coth / 2 - (z[0] * Z * np.tanh(E * t) + Z ** 2 * ratio)
    amp = np.sqrt(w / (2 * np.pi * np.sinh(2 * w * t)))
    integrand = amp * np.exp(expo) * np.cos(E * z[1] + Z * z[2])
    val = np.trapezoid(np.trapezoid(integrand, zeta, axis=1), eta)
    return val / (2 * np.pi) ** 2


def grushin_lift_kernel_A(A, t, z, **kw):
    """Kernel of sum a_ij X_i X_j - d/dt on the same group, for constant SPD A.

    With A = C C^T the fields Y_k = sum_i C_ik X_i satisfy sum Y_k^2 = sum a_ij X_i X_j.
    In exponential coordinates (a, b, c) = (z_0, z_2, z_1 - z_0 z_2 / 2) the group
    automorphism phi with d phi(X_k) = Y_k is linear: C on (a, b) and det C on c.
    Hence gamma_A(t, g) = gamma_I(t, phi^{-1} g) / det(C)^2.
    """
    C = np.linalg.cholesky(np.asarray(A, dtype=float))
    dc = np.linalg.det(C)
    z = np.asarray(z, dtype=float)
    a, b = np.linalg.solve(C, [z[0], z[2]])
    c = (z[1] - z[0] * z[2] / 2) / dc
    return grushin_lift_kernel(t, [a, c + a * b / 2, b], **kw) / dc ** 2
