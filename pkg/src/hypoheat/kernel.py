"""Heat kernels of constant-coefficient operators sum a_ij X_i X_j - d/dt.

The kernel is first computed on the lifted Carnot group, where the operator
is left-invariant, and then projected to R^n by integrating out the added
coordinates:

    Gamma_A(t, x; s, y) = int gamma_A(t - s, (y, 0)^{-1} * (x, xi)) dxi.

Lifted solver
-------------
Coordinates of the group split into *passive* ones (absent from every
coefficient of the lifted fields) and *active* ones. Left-invariant fields of
a homogeneous Carnot group are divergence free, so X_i^* = -X_i and the
operator is the negative semidefinite form -sum a_ij X_i^* X_j. In passive
coordinates we use the discrete Fourier transform (periodic box), in the
active coordinate a staggered finite-difference discretisation of X_i that
keeps the form Hermitian:

    D_i u = alpha_i (u_{k+1} - u_k) / h + i beta_i(kappa) (u_k + u_{k+1}) / 2

at cell midpoints, with alpha_i the coefficient of d/da and beta_i the symbol
of the passive part. For every frequency kappa the matrix -sum a_ij D_i^H D_j
is Hermitian tridiagonal; it is reduced to a real symmetric tridiagonal
matrix by a diagonal phase similarity and the heat semigroup is applied
exactly through its eigendecomposition, starting from a discrete delta.
Systems without active coordinates (abelian lifts) use the exact symbol.
Systems with more than one active coordinate fall back to explicit finite
differences on the full grid.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy import ndimage

from .bounds import BoundFit, FitFailure, rng_for
from .lift import CarnotLift, flow_polynomials
from .metric import GaussianE, MetricOracle
from .polynomial import PolyMap, Polynomial


class KernelError(RuntimeError):
    pass


class CFLViolation(KernelError):
    def __init__(self, dt: float, bound: float):
        super().__init__(f"time step {dt:.3g} exceeds the stability bound {bound:.3g}")
        self.dt = dt
        self.bound = bound


class MassLoss(KernelError):
    pass


class WindowTooSmall(KernelError):
    pass


class NotElliptic(ValueError):
    pass


# -- matrices ------------------------------------------------------------

@dataclass
class EllipticMatrix:
    """Symmetric matrix with Lambda^{-1} |v|^2 <= <A v, v> <= Lambda |v|^2."""

    entries: np.ndarray
    Lambda: float

    def __post_init__(self):
        A = np.array(self.entries, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise NotElliptic("A must be square")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise NotElliptic("A must be symmetric")
        A = 0.5 * (A + A.T)
        ev = np.linalg.eigvalsh(A)
        if ev.min() <= 0:
            raise NotElliptic(f"A is not positive definite (eigenvalues {ev})")
        lam = float(self.Lambda)
        if ev.min() < 1 / lam * (1 - 1e-12) or ev.max() > lam * (1 + 1e-12):
            raise NotElliptic(f"eigenvalues {ev} outside [1/{lam}, {lam}]")
        self.entries = A
        self.Lambda = lam

    @classmethod
    def from_array(cls, A, Lambda: Optional[float] = None) -> "EllipticMatrix":
        A = np.array(A, dtype=float)
        ev = np.linalg.eigvalsh(0.5 * (A + A.T))
        if ev.min() <= 0:
            raise NotElliptic(f"A is not positive definite (eigenvalues {ev})")
        lam = Lambda if Lambda is not None else max(ev.max(), 1 / ev.min(), 1.0)
        return cls(A, lam)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    @property
    def sqrt(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.entries)
        return (V * np.sqrt(w)) @ V.T

    def key(self, quantum: float = 1e-6) -> Tuple:
        return tuple(np.round(self.entries / quantum).astype(np.int64).ravel().tolist())


def random_elliptic(m: int, Lambda: float, rng: np.random.Generator) -> EllipticMatrix:
    """Random symmetric matrix with eigenvalues log-uniform in [1/Lambda, Lambda]."""
    Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    ev = np.exp(rng.uniform(-math.log(Lambda), math.log(Lambda), size=m))
    return EllipticMatrix((Q * ev) @ Q.T, Lambda)


# -- grid configuration -----------------------------------------------------

@dataclass
class GridConfig:
    """Resolution of the lifted solve.

    levels: times at which the lifted kernel is stored; other times are
        reached through the dilation law from the largest level (see LiftedKernel.level_for).
    width: window in units of sqrt(t_max), measured in the CC geometry of A
        (the ball of the fields Y = C^T X with A = C C^T).
    active_nodes / passive_nodes: grid sizes (per axis).
    """

    levels: Tuple[float, ...] = (0.25, 0.5, 1.0)
    width: float = 6.0
    active_nodes: int = 193
    passive_nodes: Tuple[int, ...] = ()
    default_passive: int = 64
    method: str = "auto"
    explicit_nodes: int = 41
    explicit_dt: Optional[float] = None

    def passive_sizes(self, weights: Sequence[int]) -> List[int]:
        if self.passive_nodes:
            return list(self.passive_nodes)
        # higher layers span r^w on the window but vary on the much smaller pole
        # scale, so they need far finer grids (negligible modes are skipped anyway)
        return [self.default_passive * (16 if w >= 2 else 1) for w in weights]


def _box_half_widths(lift: CarnotLift, radius: float, seed: int = 0, A=None) -> np.ndarray:
    """Half-widths of the lifted CC ball of the given radius (random-control cloud, padded).

    With ``A`` the ball is the one of the fields Y = C^T X, A = C C^T, whose
    sum of squares is sum a_ij X_i X_j, so the box follows the kernel's own
    anisotropy instead of being inflated by the largest eigenvalue of A.
    """
    oracle = MetricOracle(lift.lifted_system, segments=16, restarts=1, seed=seed)
    mix = None if A is None else np.linalg.cholesky(np.asarray(A, dtype=float))
    pts = oracle.reach(np.zeros(lift.N), 1.0, 4096, seed=seed, mix=mix)
    unit = np.abs(pts).max(axis=0) * 1.15
    return unit * radius ** np.asarray(lift.exponents, dtype=float)


# -- lifted kernel -------------------------------------------------------------

@dataclass
class LiftedKernel:
    """Samples of gamma_A(t, z) on a rectangular grid of the lifted group.

    ``axes[j]`` are the (uniform) node coordinates along lifted coordinate j
    and ``values[k]`` the samples at time ``levels[k]``.
    """

    lift: CarnotLift
    A: EllipticMatrix
    levels: Tuple[float, ...]
    axes: List[np.ndarray]
    values: List[np.ndarray]
    boundary: str
    method: str
    _coeffs: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._coeffs = [ndimage.spline_filter(v, order=3, mode="grid-constant") for v in self.values]

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def extent(self) -> np.ndarray:
        return np.array([[a[0], a[-1]] for a in self.axes])

    @property
    def Q(self) -> int:
        return self.lift.Q

    def mass(self, level: int) -> float:
        return float(self.values[level].sum() * np.prod(self.spacing))

    def edge_mass(self, level: int, band: float = 0.05) -> float:
        """Fraction of |mass| within the outer ``band`` of any axis."""
        v = np.abs(self.values[level])
        total = v.sum()
        mask = np.zeros(v.shape, dtype=bool)
        for j, a in enumerate(self.axes):
            k = max(1, int(band * len(a)))
            sl = [slice(None)] * v.ndim
            sl[j] = np.r_[0:k, len(a) - k:len(a)]
            idx = np.zeros(len(a), dtype=bool)
            idx[sl[j]] = True
            shape = [1] * v.ndim
            shape[j] = len(a)
            mask |= idx.reshape(shape)
        return float(v[mask].sum() / total)

    def spacing_scale(self, t) -> np.ndarray:
        """Largest grid spacing among weight-one coordinates, seen at time t.

        Evaluation at t goes through the level t_k chosen by :meth:`level_for` and the dilation
        D_{sqrt(t_k/t)}, so the effective spacing is h * sqrt(t / t_k).
        """
        t = np.asarray(t, dtype=float)
        ex = np.asarray(self.lift.exponents)
        h = float(self.spacing[ex == 1].max())
        lv = np.asarray(self.levels)[self.level_for(t)]
        return h * np.sqrt(t / lv)

    def nearest_level(self, t: float) -> int:
        """Index of the stored level closest to t on a log scale."""
        return int(np.abs(np.log(t) - np.log(np.asarray(self.levels))).argmin())

    def level_for(self, t: np.ndarray) -> np.ndarray:
        """Index of the stored level used at time t: always the largest one.

        All levels share one grid, so mapping t onto the widest kernel through
        the dilation law gives the finest effective spacing h sqrt(t / t_top).
        The other levels serve as discrete dilation-consistency checks.
        """
        return np.full(np.shape(t), int(np.argmax(self.levels)), dtype=int)

    def at_level(self, k: int, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        flat = z.reshape(-1, z.shape[-1])
        idx = (flat - self.extent[:, 0]) / self.spacing
        out = ndimage.map_coordinates(self._coeffs[k], idx.T, order=3, mode="grid-constant",
                                      cval=0.0, prefilter=False)
        return out.reshape(z.shape[:-1])

    def __call__(self, t, z, level: Optional[int] = None) -> np.ndarray:
        """gamma_A(t, z) for t > 0 via a stored level and the dilation law

        gamma(t, z) = (t/t_k)^{-Q/2} gamma(t_k, D_{sqrt(t_k/t)} z).
        """
        z = np.asarray(z, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), z.shape[:-1])
        out = np.zeros(z.shape[:-1])
        pos = t > 0
        if not pos.any():
            return out
        ks = self.level_for(t) if level is None else np.full(t.shape, level)
        ex = np.asarray(self.lift.exponents, dtype=float)
        for k in np.unique(ks[pos]):
            sel = pos & (ks == k)
            tk = self.levels[k]
            lam = np.sqrt(tk / t[sel])
            zz = z[sel] * lam[:, None] ** ex
            out[sel] = lam ** self.Q * self.at_level(int(k), zz)
        return out


def _phase_reduce(diag: np.ndarray, off: np.ndarray):
    """Hermitian tridiagonal (real diag, complex off) -> real symmetric tridiagonal.

    Returns (|off|, phases phi) with H = D R D^H, D = diag(exp(i phi)).
    """
    theta = np.angle(off)
    phi = np.concatenate([[0.0], -np.cumsum(theta)])
    return np.abs(off), phi


def _active_passive(lift: CarnotLift):
    used = set()
    for f in lift.lifted_fields:
        for c in f.components:
            used |= c.variables()
    active = [j for j in range(lift.N) if j in used]
    passive = [j for j in range(lift.N) if j not in used]
    return active, passive


def solve_lifted_kernel(lift: CarnotLift, A: EllipticMatrix,
                        cfg: Optional[GridConfig] = None, seed: int = 0) -> LiftedKernel:
    """Heat kernel of sum a_ij X^_i X^_j - d/dt on the lifted group at the configured times."""
    cfg = cfg or GridConfig()
    if A.m != lift.system.m:
        raise ValueError(f"A is {A.m}x{A.m} but the system has m={lift.system.m}")
    if lift.N > 4:
        raise KernelError("lifted kernels are limited to N <= 4")
    active, passive = _active_passive(lift)
    tmax = max(cfg.levels)
    half = _box_half_widths(lift, cfg.width * math.sqrt(tmax), seed=seed, A=A.entries)
    method = cfg.method
    if method == "auto":
        method = "spectral" if len(active) <= 1 else "explicit"
    if method == "explicit":
        return _solve_explicit(lift, A, cfg, half)
    if len(active) > 1:
        raise KernelError("spectral solver supports at most one active coordinate")
    return _solve_spectral(lift, A, cfg, half, active, passive)


def _solve_spectral(lift, A, cfg, half, active, passive) -> LiftedKernel:
    N = lift.N
    a = A.entries
    m = lift.system.m
    weights = [lift.exponents[j] for j in passive]
    sizes = cfg.passive_sizes(weights)
    # passive axes: periodic grids centred at 0
    p_axes, p_freq = [], []
    for j, M in zip(passive, sizes):
        h = 2 * half[j] / M
        p_axes.append((np.arange(M) - M // 2) * h)
        p_freq.append(2 * np.pi * np.fft.fftfreq(M, d=h))
    levels = np.asarray(cfg.levels, dtype=float)
    cell = float(np.prod([ax[1] - ax[0] for ax in p_axes])) if p_axes else 1.0

    if not active:
        # exact symbol: -sum a_ij s_i s_j with s_i = sum_p c_ip kappa_p (constants)
        grids = np.meshgrid(*p_freq, indexing="ij")
        kap = np.stack(grids, axis=-1)
        sym = np.zeros(kap.shape[:-1] + (m,))
        for i, f in enumerate(lift.lifted_fields):
            for c, j in enumerate(passive):
                coef = f.components[j]
                if coef:
                    sym[..., i] += float(coef(*([0] * N))) * kap[..., c]
        quad = np.einsum("...i,ij,...j->...", sym, a, sym)
        values = []
        for t in levels:
            u = np.real(np.fft.ifftn(np.exp(-t * quad))) / cell
            values.append(np.fft.fftshift(u))
        axes = [None] * N
        for j, ax in zip(passive, p_axes):
            axes[j] = ax
        return LiftedKernel(lift, A, tuple(levels), axes, values, "periodic", "spectral")

    (ja,) = active
    G = cfg.active_nodes
    x = np.linspace(-half[ja], half[ja], G)
    h = x[1] - x[0]
    mids = np.concatenate([[x[0] - h / 2], 0.5 * (x[1:] + x[:-1]), [x[-1] + h / 2]])
    # coefficient polynomials restricted to the active variable
    alpha = np.zeros((m, len(mids)))
    beta = np.zeros((m, len(passive), len(mids)))
    pts = np.zeros((len(mids), N))
    pts[:, ja] = mids
    for i, f in enumerate(lift.lifted_fields):
        alpha[i] = f.components[ja].evaluate(pts)
        for c, j in enumerate(passive):
            beta[i, c] = f.components[j].evaluate(pts)
    centre = int(np.argmin(np.abs(x)))
    if abs(x[centre]) > 1e-12 * h:
        raise KernelError("active grid must contain the origin (use an odd node count)")
    # real solution: keep only the non-negative frequencies of the last passive axis
    freqs = list(p_freq)
    if passive:
        freqs[-1] = 2 * np.pi * np.fft.rfftfreq(sizes[-1], d=p_axes[-1][1] - p_axes[-1][0])
    shape = [len(f) for f in freqs]
    spectra = np.zeros((len(levels), G) + tuple(shape), dtype=complex)
    w_cut = 32.0 / float(levels.min())
    for idx in np.ndindex(*shape):
        kap = np.array([freqs[c][k] for c, k in enumerate(idx)])
        b = np.einsum("cm,c->m", beta.transpose(1, 0, 2).reshape(len(passive), m * len(mids)),
                      kap).reshape(m, len(mids)) if passive else np.zeros((m, len(mids)))
        # local rows r_i = [-alpha/h + i beta/2, alpha/h + i beta/2] at every midpoint
        r0 = -alpha / h + 0.5j * b
        r1 = alpha / h + 0.5j * b
        b00 = np.einsum("im,ij,jm->m", r0.conj(), a, r0).real
        b11 = np.einsum("im,ij,jm->m", r1.conj(), a, r1).real
        b01 = np.einsum("im,ij,jm->m", r0.conj(), a, r1)
        diag = b00[1:] + b11[:-1]
        off = b01[1:-1]
        e, phi = _phase_reduce(diag, off)
        # modes with exp(-t_min w) below round-off cannot reach any stored level
        w, V = sla.eigh_tridiagonal(diag, e, select="v", select_range=(-1.0, w_cut))
        if not len(w):
            continue
        # -L = D R D^H with R = V diag(w) V^T; u(t) = D V exp(-t w) V^T D^H delta
        coef = V[centre] * np.exp(-1j * phi[centre]) / h
        ph = np.exp(1j * phi)
        for li, t in enumerate(levels):
            spectra[(li, slice(None)) + idx] = ph * (V @ (np.exp(-t * w) * coef))
    values = []
    paxes = tuple(range(1, 1 + len(passive)))
    order = [ja] + passive
    perm = np.argsort(order)
    for li in range(len(levels)):
        if passive:
            u = np.fft.irfftn(spectra[li], s=sizes, axes=paxes) / cell
        else:
            u = np.real(spectra[li])
        u = np.fft.fftshift(u, axes=paxes)
        values.append(np.ascontiguousarray(np.transpose(u, perm)))
    axes = [None] * N
    axes[ja] = x
    for j, ax in zip(passive, p_axes):
        axes[j] = ax
    return LiftedKernel(lift, A, tuple(float(t) for t in levels), axes, values,
                        "dirichlet+periodic", "spectral")


def _solve_explicit(lift, A, cfg, half) -> LiftedKernel:
    """Explicit Euler with centred differences on the full lifted grid (small grids only)."""
    N = lift.N
    G = cfg.explicit_nodes
    axes = [np.linspace(-hw, hw, G) for hw in half]
    hs = np.array([ax[1] - ax[0] for ax in axes])
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    coeffs = [[f.components[k].evaluate(mesh) for k in range(N)] for f in lift.lifted_fields]
    a = A.entries
    m = lift.system.m
    norms = [sum(np.abs(coeffs[i][k]).max() / hs[k] for k in range(N)) for i in range(m)]
    rho = sum(abs(a[i, j]) * norms[i] * norms[j] for i in range(m) for j in range(m))
    bound = 2.0 / rho
    dt = cfg.explicit_dt if cfg.explicit_dt is not None else 0.8 * bound
    if dt > bound:
        raise CFLViolation(dt, bound)

    def apply_field(i, u):
        out = np.zeros_like(u)
        for k in range(N):
            c = coeffs[i][k]
            if not np.any(c):
                continue
            d = np.zeros_like(u)
            sl_c = [slice(None)] * N
            sl_p = [slice(None)] * N
            sl_m = [slice(None)] * N
            sl_c[k] = slice(1, -1)
            sl_p[k] = slice(2, None)
            sl_m[k] = slice(None, -2)
            d[tuple(sl_c)] = (u[tuple(sl_p)] - u[tuple(sl_m)]) / (2 * hs[k])
            out += c * d
        return out

    def L(u):
        first = [apply_field(j, u) for j in range(m)]
        out = np.zeros_like(u)
        for i in range(m):
            for j in range(m):
                if a[i, j]:
                    out += a[i, j] * apply_field(i, first[j])
        return out

    # mollified delta: normalised Gaussian bump three cells wide, treated as time t0
    r2 = sum((mesh[..., k] / (3 * hs[k])) ** 2 for k in range(N))
    u = np.exp(-0.5 * r2)
    u /= u.sum() * np.prod(hs)
    t = 0.0
    values = []
    for target in sorted(cfg.levels):
        while t < target - 1e-12:
            step = min(dt, target - t)
            u = u + step * L(u)
            u[tuple([0] * N)] = u[tuple([0] * N)]  # keep shape; boundary set below
            for k in range(N):
                sl = [slice(None)] * N
                sl[k] = 0
                u[tuple(sl)] = 0.0
                sl[k] = -1
                u[tuple(sl)] = 0.0
            t += step
        values.append(u.copy())
    lk = LiftedKernel(lift, A, tuple(sorted(cfg.levels)), axes, values, "absorbing", "explicit")
    for k in range(len(values)):
        if abs(lk.mass(k) - 1) > 0.01:
            raise MassLoss(f"mass {lk.mass(k):.4f} at t={lk.levels[k]}")
    return lk


# -- projection --------------------------------------------------------------

class ProjectedKernel:
    """Gamma_A(t, x; s, y) = int gamma_A(t - s, (y,0)^{-1} * (x, xi)) dxi by trapezoid rule."""

    def __init__(self, lk: LiftedKernel, nodes: int = 161, tail_tol: float = 5e-3):
        self.lk = lk
        self.lift = lk.lift
        self.n = self.lift.n
        self.p = self.lift.p
        self.nodes = nodes
        self.tail_tol = tail_tol
        self.last_tail = 0.0
        if self.p:
            # window: the stored extent of each added coordinate at the top level
            self._xi_half = np.array([min(-lk.axes[j][0], lk.axes[j][-1])
                                      for j in range(self.n, self.lift.N)])

    def __call__(self, t, x, s, y, check_tail: bool = False, level: Optional[int] = None) -> np.ndarray:
        """Gamma_A(t, x; s, y); ``level`` forces the stored level used (default: the top one)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x, y = np.broadcast_arrays(x, y)
        B = x.shape[0]
        tau = np.broadcast_to(np.asarray(t, dtype=float) - np.asarray(s, dtype=float), (B,))
        out = np.zeros(B)
        pos = tau > 0
        if not pos.any():
            return out
        xs, ys, ts = x[pos], y[pos], tau[pos]
        yi = self.lift.inv(np.concatenate([ys, np.zeros((len(ys), self.p))], axis=1))
        if not self.p:
            out[pos] = self.lk(ts, self.lift.multiply(yi, xs), level=level)
            return out
        if self.p > 1:
            raise NotImplementedError("projection implemented for one added coordinate")
        s_exp = self.lift.exponents[self.n]
        ks = self.lk.level_for(ts) if level is None else np.full(ts.shape, level)
        tk = np.asarray(self.lk.levels)[ks]
        halfw = self._xi_half[0] * (ts / tk) ** (s_exp / 2)
        u = np.linspace(-1.0, 1.0, self.nodes)
        w = np.full(self.nodes, 1.0)
        w[0] = w[-1] = 0.5
        tt = np.repeat(ts[:, None], self.nodes, 1)

        def sample(lo, hi):
            xi = lo[:, None] + (hi - lo)[:, None] * (u[None, :] + 1) / 2
            z = np.concatenate([np.repeat(xs[:, None, :], self.nodes, 1), xi[..., None]], axis=-1)
            g = self.lift.multiply(np.repeat(yi[:, None, :], self.nodes, 1), z)
            return xi, self.lk(tt, g, level=level)

        xi, vals = sample(-halfw, halfw)
        dxi = halfw * (u[1] - u[0])
        integral = (vals * w).sum(1) * dxi
        if check_tail:
            edge = (np.abs(vals[:, 0]) + np.abs(vals[:, -1])) * dxi * 4
            rel = edge / np.maximum(np.abs(integral), 1e-300)
            self.last_tail = float(rel.max())
            if self.last_tail > self.tail_tol:
                raise WindowTooSmall(f"estimated tail {self.last_tail:.2e} exceeds {self.tail_tol}")
        out[pos] = integral
        return out


def project_kernel(lk: LiftedKernel, nodes: int = 161) -> ProjectedKernel:
    return ProjectedKernel(lk, nodes=nodes)


def euclidean_kernel(A, t, x, s, y) -> np.ndarray:
    """Closed form for X_i = d_i: Gaussian with covariance 2 (t - s) A."""
    A = np.asarray(A, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    tau = np.broadcast_to(np.asarray(t, float) - np.asarray(s, float), (max(len(x), len(y)),))
    n = A.shape[0]
    Ai = np.linalg.inv(A)
    d = x - y
    out = np.zeros(len(tau))
    pos = tau > 0
    q = np.einsum("bi,ij,bj->b", d, Ai, d) if d.ndim == 2 else 0
    out[pos] = np.exp(-q[pos] / (4 * tau[pos])) / np.sqrt((4 * np.pi * tau[pos]) ** n * np.linalg.det(A))
    return out


# -- frozen kernels ----------------------------------------------------------------

class FrozenKernelCache:
    """Projected kernels keyed by the coefficient matrix rounded to 1e-6."""

    def __init__(self, lift: CarnotLift, cfg: Optional[GridConfig] = None, Lambda: float = 4.0,
                 nodes: int = 161):
        self.lift = lift
        self.cfg = cfg or GridConfig()
        self.Lambda = Lambda
        self.nodes = nodes
        self._store: Dict[Tuple, ProjectedKernel] = {}
        self._lock = threading.Lock()

    def get(self, A) -> ProjectedKernel:
        M = A if isinstance(A, EllipticMatrix) else EllipticMatrix(np.asarray(A, float), self.Lambda)
        key = M.key()
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        pk = ProjectedKernel(solve_lifted_kernel(self.lift, M, self.cfg), nodes=self.nodes)
        with self._lock:
            return self._store.setdefault(key, pk)

    def __len__(self):
        return len(self._store)


def frozen_kernel(cache: FrozenKernelCache, coeff, t0: float, x0) -> ProjectedKernel:
    """Kernel of sum a_ij(t0, x0) X_i X_j - d/dt (coefficients frozen, fields not)."""
    return cache.get(coeff(t0, np.asarray(x0, dtype=float)))


# -- derivatives along flows -------------------------------------------------------

class FieldFlows:
    """Exact flows exp(h X_i)(x) of the (downstairs or lifted) fields."""

    def __init__(self, system):
        self.maps = [PolyMap(flow_polynomials(f, system.sigma)) for f in system.fields]
        self.n = system.n

    def __call__(self, i: int, x: np.ndarray, h) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hh = np.broadcast_to(np.asarray(h, dtype=float), x.shape[:-1])[..., None]
        return self.maps[i](np.concatenate([x, hh], axis=-1))


def apply_operator_fd(f, flows: FieldFlows, A: np.ndarray, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """sum a_ij X_i X_j f at x by centred differences along flows (step h per point)."""
    A = np.asarray(A)
    m = A.shape[0]
    x = np.atleast_2d(x)
    h = np.broadcast_to(np.asarray(h, float), (len(x),))
    f0 = f(x)
    total = np.zeros(len(x))
    for i in range(m):
        if A[i, i]:
            fp = f(flows(i, x, h))
            fm = f(flows(i, x, -h))
            total += A[i, i] * (fp - 2 * f0 + fm) / h ** 2
    for i in range(m):
        for j in range(i + 1, m):
            if A[i, j]:
                # X_i X_j f(x) = d^2/ds dr f(exp(r X_j) exp(s X_i) x) at 0
                acc = np.zeros(len(x))
                for si, sj, sg in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                    acc += sg * f(flows(j, flows(i, x, si * h), sj * h))
                xixj = acc / (4 * h ** 2)
                acc = np.zeros(len(x))
                for si, sj, sg in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                    acc += sg * f(flows(i, flows(j, x, sj * h), si * h))
                xjxi = acc / (4 * h ** 2)
                total += A[i, j] * (xixj + xjxi)
    return total


def field_derivative_fd(f, flows: FieldFlows, i: int, x: np.ndarray, h) -> np.ndarray:
    x = np.atleast_2d(x)
    return (f(flows(i, x, h)) - f(flows(i, x, -h))) / (2 * np.asarray(h))


# -- verification ------------------------------------------------------------------

def kernel_probes(oracle: MetricOracle, times: Sequence[float], count: int, seed: int = 0,
                  max_ratio: float = 4.0, spread: float = 1.0):
    """Random probe triples (tau, x, y) with d(x, y)/sqrt(tau) in [0, max_ratio]."""
    rng = rng_for(oracle.seed, "kernel-probes", seed)
    n = oracle.n
    w = oracle.weights
    out_t, out_x, out_y = [], [], []
    for tau in times:
        scale = math.sqrt(tau)
        x = rng.normal(size=(count * 3, n)) * spread * scale ** w
        y = x + rng.normal(size=(count * 3, n)) * 1.2 * scale ** w
        d = oracle.distances(x, y).d
        ok = np.nonzero(d / scale <= max_ratio)[0][:count]
        out_t.append(np.full(len(ok), tau))
        out_x.append(x[ok])
        out_y.append(y[ok])
    return np.concatenate(out_t), np.concatenate(out_x), np.concatenate(out_y)


def verify_gaussian_bounds(kernels: Sequence, E: GaussianE, tau, x, y,
                           kmax: int = 10) -> BoundFit:
    """Smallest kappa = 2^k (k <= kmax) with the two-sided E-bounds at every probe for all kernels.

    Bounds: kappa^{-1} |B|^{-1} e^{-kappa d^2/tau} <= Gamma <= kappa |B|^{-1} e^{-d^2/(kappa tau)}.
    """
    tau = np.asarray(tau, float)
    d = E.distances(x, y)
    vol = E.volume(x, np.sqrt(tau))
    gam = [np.asarray(k(tau, x, 0.0, y)) for k in kernels]
    P = len(tau)
    if P == 0:
        return BoundFit("gaussian-bounds", {"kappa": float("nan")}, 0)
    for k in range(kmax + 1):
        kap = 2.0 ** k
        lo = np.exp(-kap * d ** 2 / tau) / (kap * vol)
        hi = kap * np.exp(-d ** 2 / (kap * tau)) / vol
        ok = all(np.all((g >= lo) & (g <= hi)) for g in gam)
        if ok:
            margins = [np.minimum(g / lo, hi / g) for g in gam]
            worst = min(float(mm.min()) for mm in margins)
            which = int(np.argmin([mm.min() for mm in margins]))
            i = int(np.argmin(margins[which]))
            return BoundFit("gaussian-bounds", {"kappa": kap}, P * len(kernels), margin=worst,
                            tightest={"kernel": which, "tau": float(tau[i]), "d": float(d[i]),
                                      "x": x[i].tolist(), "y": y[i].tolist()})
    viol = []
    kap = 2.0 ** kmax
    for which, g in enumerate(gam):
        lo = np.exp(-kap * d ** 2 / tau) / (kap * vol)
        hi = kap * np.exp(-d ** 2 / (kap * tau)) / vol
        bad = np.nonzero((g < lo) | (g > hi))[0]
        viol += [(which, int(i)) for i in bad[:5]]
    raise FitFailure(f"no kappa <= 2^{kmax} fits", probe=viol)


def verify_scaling_law(pk: ProjectedKernel, q: int, lam: float, tau, x, y) -> float:
    """max |lam^q Gamma(lam^2 t, δ_lam x; 0, δ_lam y) / Gamma(t, x; 0, y) - 1| over probes.

    Each side is read from the stored level nearest to its own time, so for
    times matching two different levels (e.g. t = 0.25 and 1 with lam = 2)
    the comparison is between independently evolved grids rather than an
    identity of the dilation-based evaluator.
    """
    w = np.asarray(pk.lift.system.sigma, float)
    tau = np.atleast_1d(np.asarray(tau, float))
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    worst = 0.0
    for i in range(len(tau)):
        base = pk(tau[i], x[i], 0.0, y[i], level=pk.lk.nearest_level(tau[i]))[0]
        t2 = lam ** 2 * tau[i]
        scaled = pk(t2, x[i] * lam ** w, 0.0, y[i] * lam ** w, level=pk.lk.nearest_level(t2))[0]
        worst = max(worst, abs(lam ** q * scaled / base - 1))
    return float(worst)


def _trapezoid_mesh(lo, hi, nodes: int):
    """Tensor trapezoid rule on the box [lo, hi]: (points, weights)."""
    grids = [np.linspace(a, b, nodes) for a, b in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, len(grids))
    w1 = np.full(nodes, 1.0)
    w1[0] = w1[-1] = 0.5
    wts = np.ones(1)
    for g in grids:
        wts = np.multiply.outer(wts, w1 * (g[1] - g[0]))
    return mesh, wts.ravel()


def _adaptive_integral(f, centre, half, nodes: int, rel: float = 1e-10) -> float:
    """Trapezoid integral of f over centre +- half, taken on the support of f.

    A first pass on the full window locates the cells where |f| exceeds
    ``rel`` times its maximum; the second pass spends all nodes on that
    bounding box (padded by one coarse cell).  Without the trim, windows sized
    for the widest direction of an anisotropic kernel leave too few nodes
    across its narrow directions.
    """
    centre = np.asarray(centre, float)
    half = np.asarray(half, float)
    mesh, wts = _trapezoid_mesh(centre - half, centre + half, nodes)
    vals = f(mesh)
    big = np.abs(vals) >= rel * np.abs(vals).max()
    if not big.any():
        return float((vals * wts).sum())
    cell = 2 * half / (nodes - 1)
    lo = np.maximum(mesh[big].min(0) - cell, centre - half)
    hi = np.minimum(mesh[big].max(0) + cell, centre + half)
    mesh, wts = _trapezoid_mesh(lo, hi, nodes)
    return float((f(mesh) * wts).sum())


def _default_half(pk, t: float, s: float) -> np.ndarray:
    lk = pk.lk
    n = pk.lift.n
    half = np.array([min(-lk.axes[j][0], lk.axes[j][-1]) for j in range(n)])
    return half * ((t - s) / max(lk.levels)) ** (np.asarray(pk.lift.system.sigma) / 2)


def verify_reproduction(pk, t: float, tau_mid: float, s: float, x, y, half=None,
                        nodes: int = 81) -> float:
    """max relative deviation of int Gamma(t,x;tau,z) Gamma(tau,z;s,y) dz from Gamma(t,x;s,y)."""
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    if half is None:
        half = _default_half(pk, t, s)
    worst = 0.0
    for xi, yi in zip(x, y):
        integral = _adaptive_integral(
            lambda z: pk(t, xi[None], tau_mid, z) * pk(tau_mid, z, s, yi[None]),
            0.5 * (xi + yi), half, nodes)
        direct = float(pk(t, xi[None], s, yi[None])[0])
        worst = max(worst, abs(integral / direct - 1))
    return worst


def mass(pk, t: float, s: float, x, half=None, nodes: int = 121, over: str = "y") -> np.ndarray:
    """int Gamma(t, x; s, y) dy (over='y') or dx (over='x') by the trapezoid rule."""
    x = np.atleast_2d(np.asarray(x, float))
    if half is None:
        half = _default_half(pk, t, s)
    out = []
    for xi in x:
        if over == "y":
            f = lambda z, xi=xi: pk(t, xi[None], s, z)  # noqa: E731
        else:
            f = lambda z, xi=xi: pk(t, z, s, xi[None])  # noqa: E731
        out.append(_adaptive_integral(f, xi, half, nodes))
    return np.array(out)


def residual_admissible(pk, tau, d) -> np.ndarray:
    """Mask of probes with d(x, y) >= 2 * (grid spacing scale at tau)."""
    return np.asarray(d) >= 2 * pk.lk.spacing_scale(tau)


def pde_residual(pk, A, tau, x, y, hfrac: float = 1 / 50, flows: Optional[FieldFlows] = None,
                 richardson: bool = True) -> np.ndarray:
    """|H_A Gamma| / (Gamma / tau) at probes, with derivatives along exact flows.

    Space derivatives use centred differences along the flows with step
    sqrt(tau) * hfrac, d/dt a centred difference with step tau * 2 hfrac at a
    fixed level.  With ``richardson`` the signed residual is evaluated at
    steps h and 2h and combined as (4 R(h) - R(2h)) / 3, which removes the
    O(h^2) truncation error; far from the pole that error otherwise dominates
    because log Gamma varies on the scale tau / d(x, y).
    Probes should satisfy :func:`residual_admissible` (away from the pole).
    """
    A = np.asarray(A.entries if isinstance(A, EllipticMatrix) else A, float)
    flows = flows or FieldFlows(pk.lift.system)
    tau = np.asarray(tau, float)
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    res = np.zeros(len(tau))
    for i in range(len(tau)):
        t, xi, yi = tau[i], x[i], y[i]
        g = lambda pts, tt=t: pk(tt, pts, 0.0, yi[None])  # noqa: E731
        g0 = pk(t, xi[None], 0.0, yi[None])[0]

        def signed(frac):
            space = apply_operator_fd(g, flows, A, xi[None], math.sqrt(t) * frac)[0]
            dt = t * 2 * frac
            gp = pk(t + dt, xi[None], 0.0, yi[None])[0]
            gm = pk(t - dt, xi[None], 0.0, yi[None])[0]
            return (space - (gp - gm) / (2 * dt)) / (g0 / t)

        r = signed(hfrac)
        if richardson:
            r = (4 * r - signed(2 * hfrac)) / 3
        res[i] = abs(r)
    return res


# -- persistence ---------------------------------------------------------------------

HYPK_MAGIC = b"HYPK"
HYPK_VERSION = 1


def write_hypk(path, values: np.ndarray, spacings: Sequence[float], extents: Sequence[Tuple[float, float]]) -> None:
    """Grid file: magic, u16 version, u16 ndim, u32 dims, f64 spacings, f64 (lo, hi) extents,
    then float64 little-endian values in row-major order."""
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(HYPK_MAGIC)
        fh.write(struct.pack("<HH", HYPK_VERSION, values.ndim))
        fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
        fh.write(struct.pack(f"<{values.ndim}d", *[float(s) for s in spacings]))
        fh.write(struct.pack(f"<{2 * values.ndim}d", *[float(v) for e in extents for v in e]))
        fh.write(values.tobytes(order="C"))


def read_hypk(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HYPK_MAGIC:
        raise ValueError("not a HYPK file")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != HYPK_VERSION:
        raise ValueError(f"unsupported HYPK version {version}")
    off = 8
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    spacings = struct.unpack_from(f"<{ndim}d", data, off)
    off += 8 * ndim
    ext = struct.unpack_from(f"<{2 * ndim}d", data, off)
    off += 16 * ndim
    values = np.frombuffer(data, dtype="<f8", offset=off).reshape(dims).copy()
    return values, list(spacings), [tuple(ext[2 * k:2 * k + 2]) for k in range(ndim)]
