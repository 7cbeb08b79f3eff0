"""Discrete heat semigroups of constant-coefficient operators on R^n grids.

Used by the Levi construction, where frozen operators act on whole grid
functions rather than on single points. The discretisation mirrors the lifted
solver: coordinates that do not occur in any coefficient of X_1..X_m
("passive") are periodic and handled by the FFT; the single remaining
("active") coordinate uses the staggered Hermitian form with reflecting ends,

    -L_A = sum a_ij D_i^H D_j,
    D_i u = alpha_i (u_{k+1} - u_k)/h + i beta_i(kappa) (u_k + u_{k+1})/2,

so e^{t L_A} conserves mass and maps 1 to 1. Second derivatives X_i X_j are
represented by the symmetrised products -(D_i^H D_j + D_j^H D_i)/2, hence
sum a_ij X_i X_j equals L_A exactly on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy import ndimage

from .fields import FieldSystem


class GridUnsupported(NotImplementedError):
    pass


def _split_coordinates(system: FieldSystem):
    used = set()
    for f in system.fields:
        for c in f.components:
            used |= c.variables()
    active = [j for j in range(system.n) if j in used]
    passive = [j for j in range(system.n) if j not in used]
    return active, passive


class DownstairsGrid:
    """Tensor grid on R^n: uniform nodes in the active coordinate, periodic nodes elsewhere.

    Parameters
    ----------
    system : FieldSystem
    half_widths : per-coordinate half-widths of the window.
    active_nodes : odd number of nodes of the active axis.
    passive_nodes : nodes per passive axis (even).
    """

    def __init__(self, system: FieldSystem, half_widths: Sequence[float], active_nodes: int = 97,
                 passive_nodes: Sequence[int] = (128,)):
        self.system = system
        self.n = system.n
        self.m = system.m
        active, passive = _split_coordinates(system)
        if len(active) > 1:
            raise GridUnsupported("grid semigroups support at most one active coordinate")
        self.active = active
        self.passive = passive
        pn = list(passive_nodes)
        if len(pn) == 1 and len(passive) > 1:
            pn = pn * len(passive)
        if len(pn) < len(passive):
            raise ValueError("one node count per passive coordinate is required")
        hw = np.asarray(half_widths, dtype=float)
        self.axes: List[np.ndarray] = [None] * self.n
        for j in active:
            if active_nodes % 2 == 0:
                raise ValueError("the active axis needs an odd node count")
            self.axes[j] = np.linspace(-hw[j], hw[j], active_nodes)
        for j, M in zip(passive, pn):
            h = 2 * hw[j] / M
            self.axes[j] = (np.arange(M) - M // 2) * h
        self.h = np.array([a[1] - a[0] for a in self.axes])
        self.cell = float(np.prod(self.h))
        self.shape = tuple(len(a) for a in self.axes)
        self.G = len(self.axes[active[0]]) if active else 1
        # frequencies (rfft along the last passive axis)
        self.freqs = []
        for c, j in enumerate(passive):
            M = len(self.axes[j])
            if c == len(passive) - 1:
                self.freqs.append(2 * np.pi * np.fft.rfftfreq(M, d=self.h[j]))
            else:
                self.freqs.append(2 * np.pi * np.fft.fftfreq(M, d=self.h[j]))
        self.fshape = tuple(len(f) for f in self.freqs)
        self._build_difference_forms()
        self._Q = None

    # -- layout -----------------------------------------------------------------

    @property
    def mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def to_spectral(self, u: np.ndarray) -> np.ndarray:
        """Physical (shape) -> spectral (fshape + (G,))."""
        v = u
        if self.active:
            v = np.moveaxis(v, self.active[0], -1)
        else:
            v = v[..., None]
        pax = tuple(range(len(self.passive)))
        if pax:
            v = np.fft.ifftshift(v, axes=pax)
            v = np.fft.rfftn(v, axes=pax)
        return np.ascontiguousarray(v, dtype=complex)

    def to_physical(self, s: np.ndarray) -> np.ndarray:
        pax = tuple(range(len(self.passive)))
        if pax:
            sizes = [len(self.axes[j]) for j in self.passive]
            v = np.fft.irfftn(s, s=sizes, axes=pax)
            v = np.fft.fftshift(v, axes=pax)
        else:
            v = s.real
        if self.active:
            v = np.moveaxis(v, -1, self.active[0])
        else:
            v = v[..., 0]
        return np.ascontiguousarray(v)

    def delta(self, y) -> Tuple[np.ndarray, np.ndarray]:
        """Discrete delta at the grid node nearest to y; returns (function, node)."""
        idx = tuple(int(np.argmin(np.abs(a - yy))) for a, yy in zip(self.axes, y))
        u = np.zeros(self.shape)
        u[idx] = 1.0 / self.cell
        return u, np.array([a[i] for a, i in zip(self.axes, idx)])

    def interpolate(self, u: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Cubic B-spline interpolation of a grid function (periodic in passive axes)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.empty((self.n, len(x)))
        for j, a in enumerate(self.axes):
            idx[j] = (x[:, j] - a[0]) / self.h[j]
        return ndimage.map_coordinates(u, idx, order=3, mode="grid-wrap")

    def integrate(self, u: np.ndarray) -> float:
        return float(u.sum() * self.cell)

    # -- operators ------------------------------------------------------------------

    def _build_difference_forms(self):
        """Local rows of D_i at active midpoints for every frequency."""
        m = self.m
        if self.active:
            ja = self.active[0]
            x = self.axes[ja]
            mids = 0.5 * (x[1:] + x[:-1])
            pts = np.zeros((len(mids), self.n))
            pts[:, ja] = mids
            h = self.h[ja]
        else:
            pts = np.zeros((1, self.n))
            h = 1.0
        alpha = np.zeros((m, len(pts)))
        beta = np.zeros((m, len(self.passive), len(pts)))
        for i, f in enumerate(self.system.fields):
            if self.active:
                alpha[i] = f.components[self.active[0]].evaluate(pts)
            for c, j in enumerate(self.passive):
                beta[i, c] = f.components[j].evaluate(pts)
        grids = np.meshgrid(*self.freqs, indexing="ij") if self.passive else []
        kap = np.stack(grids, axis=-1) if self.passive else np.zeros((0,))
        # b[..., i, mid] = sum_c beta[i, c, mid] kappa_c
        if self.passive:
            b = np.einsum("icm,...c->...im", beta, kap)
        else:
            b = np.zeros((m, len(pts)))
        if self.active:
            self.r0 = -alpha / h + 0.5j * b
            self.r1 = alpha / h + 0.5j * b
        else:
            # no active coordinate: D_i = i s_i
            self.r0 = 1j * b
            self.r1 = None

    def form(self, P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Hermitian tridiagonal (diag, upper) of sum P_ij D_i^H D_j for symmetric P."""
        P = np.asarray(P, dtype=float)
        if self.r1 is None:
            d = np.einsum("...i,ij,...j->...", self.r0.conj()[..., 0], P, self.r0[..., 0]).real
            return d[..., None], np.zeros(d.shape + (0,), dtype=complex)
        r0, r1 = self.r0, self.r1
        b00 = np.einsum("...im,ij,...jm->...m", r0.conj(), P, r0).real
        b11 = np.einsum("...im,ij,...jm->...m", r1.conj(), P, r1).real
        b01 = np.einsum("...im,ij,...jm->...m", r0.conj(), P, r1)
        G = self.G
        diag = np.zeros(b00.shape[:-1] + (G,))
        diag[..., :-1] += b00
        diag[..., 1:] += b11
        return diag, b01

    @property
    def second_derivatives(self) -> Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]]:
        """Banded representation of X_i X_j := -(D_i^H D_j + D_j^H D_i)/2 (i <= j)."""
        if self._Q is None:
            self._Q = {}
            for i in range(self.m):
                for j in range(i, self.m):
                    P = np.zeros((self.m, self.m))
                    P[i, j] += 0.5
                    P[j, i] += 0.5
                    d, u = self.form(P)
                    self._Q[(i, j)] = (-d, -u)
        return self._Q

    @staticmethod
    def apply_banded(band, s: np.ndarray) -> np.ndarray:
        d, u = band
        out = d * s
        if u.shape[-1]:
            out[..., :-1] += u * s[..., 1:]
            out[..., 1:] += u.conj() * s[..., :-1]
        return out


class Semigroup:
    """e^{t L_A} on a DownstairsGrid through per-frequency eigendecompositions."""

    def __init__(self, grid: DownstairsGrid, A: np.ndarray):
        self.grid = grid
        self.A = np.asarray(A, dtype=float)
        diag, up = grid.form(self.A)
        G = grid.G
        fshape = diag.shape[:-1]
        self.w = np.empty(fshape + (G,))
        self.U = np.empty(fshape + (G, G), dtype=complex)
        for idx in np.ndindex(*fshape):
            d = diag[idx]
            if G == 1:
                self.w[idx] = d
                self.U[idx] = 1.0
                continue
            off = up[idx]
            phi = np.concatenate([[0.0], -np.cumsum(np.angle(off))])
            w, V = sla.eigh_tridiagonal(d, np.abs(off))
            self.w[idx] = np.maximum(w, 0.0)
            self.U[idx] = np.exp(1j * phi)[:, None] * V

    def to_eig(self, s: np.ndarray) -> np.ndarray:
        return np.einsum("...ji,...j->...i", self.U.conj(), s)

    def from_eig(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.U, c)

    def evolve(self, s: np.ndarray, t: float) -> np.ndarray:
        return self.from_eig(np.exp(-t * self.w) * self.to_eig(s))


def phi_weights(w: np.ndarray, gap: float, length: float):
    """Exact weights for int_0^L e^{-(gap + L - u) w} [(1 - u/L) g0 + (u/L) g1] du.

    Returns (F0, F1) multiplying g0 and g1.
    """
    z = w * length
    small = z < 1e-3
    zs = np.where(small, 1.0, z)
    em = -np.expm1(-zs)
    phi1 = np.where(small, 1 - z / 2 + z ** 2 / 6 - z ** 3 / 24, em / zs)
    psi = np.where(small, 0.5 - z / 3 + z ** 2 / 8 - z ** 3 / 30,
                   (em - zs * np.exp(-zs)) / zs ** 2)
    decay = np.exp(-gap * w) * length
    return decay * psi, decay * (phi1 - psi)
