"""Empirical parabolic and stationary Harnack ratios.

Parabolic: for u >= 0 caloric on (t0 - r^2, t0) x B_X(x0, r) the theorem bounds

    sup_{(t0 - h2 r^2, t0 - h1 r^2) x B_X(x0, gamma r)} u <= M u(t0, x0)

with M depending only on r0, h1, h2, gamma. We estimate the left-hand side by
a space-time grid followed by local Monte Carlo refinement.

Stationary: u >= 0 with sum c_ij X_i X_j u = 0 on B_X(x0, 3r) satisfies
sup_{B(x0,r)} u <= c inf_{B(x0,r)} u; u is produced by a discrete Dirichlet
solve and the ratio is measured on grid nodes of the inner ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bounds import rng_for
from .fields import FieldSystem
from .lift import CarnotLift, lift_function
from .metric import MetricOracle, ball_box
from .semigroup import DownstairsGrid, Semigroup


class CenterValueZero(ValueError):
    pass


class SolverDiverged(RuntimeError):
    pass


@dataclass
class HarnackBox:
    """Cylinder (t0 - r^2, t0) x B(x0, r) with waiting region (t0 - h2 r^2, t0 - h1 r^2) x B(x0, gamma r)."""

    r0: float
    h1: float
    h2: float
    gamma: float
    t0: float
    x0: np.ndarray
    r: float

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if not (0 < self.h1 < self.h2 < 1):
            raise ValueError("need 0 < h1 < h2 < 1")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0 < self.r <= self.r0):
            raise ValueError("need 0 < r <= r0")

    @property
    def waiting_times(self):
        return self.t0 - self.h2 * self.r ** 2, self.t0 - self.h1 * self.r ** 2

    def scaled(self, r: float) -> "HarnackBox":
        return HarnackBox(self.r0, self.h1, self.h2, self.gamma, self.t0, self.x0, r)

    def to_json(self) -> dict:
        return {"r0": self.r0, "h1": self.h1, "h2": self.h2, "gamma": self.gamma,
                "t0": self.t0, "x0": self.x0.tolist(), "r": self.r}


@dataclass
class HarnackReport:
    ratios: List[float]
    center_values: List[float]
    sup_points: List[list]
    box: HarnackBox
    samples: int
    extra: Dict = field(default_factory=dict)

    @property
    def M_hat(self) -> float:
        return float(max(self.ratios)) if self.ratios else float("nan")

    def to_json(self) -> dict:
        return {"box": self.box.to_json(), "per_pole_ratios": [float(r) for r in self.ratios],
                "M_hat": self.M_hat, "samples": self.samples,
                "sup_points": self.sup_points, **self.extra}


class _BallSampler:
    """Grid points of B_X(x0, rho) (cached membership) and random points in it."""

    def __init__(self, oracle: MetricOracle, x0, rho: float, resolution: int = 33, seed: int = 0):
        self.oracle = oracle
        self.x0 = np.asarray(x0, dtype=float)
        self.rho = rho
        lo, hi = ball_box(oracle, self.x0, rho, seed=seed)
        self.lo, self.hi = lo, hi
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
        d = oracle.light().distances(np.broadcast_to(self.x0, pts.shape), pts).d
        self.points = pts[d <= rho]
        self.cell = (hi - lo) / (resolution - 1)

    def inside(self, pts: np.ndarray) -> np.ndarray:
        d = self.oracle.light().distances(np.broadcast_to(self.x0, pts.shape), pts).d
        return d <= self.rho


def parabolic_harnack_check(u: Callable, box: HarnackBox, oracle: MetricOracle,
                            samples: int = 400, seed: int = 0, resolution: int = 33,
                            rounds: int = 3, scale: float = 1.0) -> HarnackReport:
    """Empirical ratio sup_{waiting region} u / u(t0, x0) for one solution.

    ``u(t, X)`` takes a time array and points X of shape (k, n). The sup is
    taken over a (resolution x ball grid) space-time lattice, then refined by
    ``rounds`` rounds of ``samples`` uniform points in shrinking neighbourhoods
    of the incumbent maximiser (kept inside the waiting region). Each round
    draws 16 times and attaches every spatial sample to one of them.
    """
    center = float(np.asarray(u(np.array([box.t0]), box.x0[None]))[0])
    if not np.isfinite(center) or center < 1e-14 * scale:
        raise CenterValueZero(f"u(t0, x0) = {center:.3g}")
    key = (tuple(box.x0), box.gamma * box.r, resolution, seed)
    cache = oracle.__dict__.setdefault("_harnack_samplers", {})
    if key not in cache:
        cache[key] = _BallSampler(oracle, box.x0, box.gamma * box.r, resolution, seed)
    sampler = cache[key]
    ta, tb = box.waiting_times
    times = np.linspace(ta, tb, resolution)
    P = sampler.points
    best, arg = -np.inf, None
    for t in times:
        vals = np.asarray(u(np.full(len(P), t), P))
        k = int(np.argmax(vals))
        if vals[k] > best:
            best, arg = float(vals[k]), (t, P[k])
    rng = rng_for(seed, "harnack-refine")
    width_t = (tb - ta) / (resolution - 1)
    width_x = sampler.cell.copy()
    for _ in range(rounds):
        t_c, x_c = arg
        # a few distinct times per round keep time-stepped solutions cheap
        tk = np.clip(t_c + rng.uniform(-1, 1, 16) * width_t, ta, tb)
        ts = tk[rng.integers(0, 16, samples)]
        xs = x_c + rng.uniform(-1, 1, size=(samples, len(x_c))) * width_x
        ok = sampler.inside(xs)
        if ok.any():
            vals = np.asarray(u(ts[ok], xs[ok]))
            k = int(np.argmax(vals))
            if vals[k] > best:
                best, arg = float(vals[k]), (float(ts[ok][k]), xs[ok][k])
        width_t /= 2
        width_x = width_x / 2
    return HarnackReport([best / center], [center], [[float(arg[0])] + list(map(float, arg[1]))],
                         box, samples)


class GridCaloric:
    """u(t, x) = e^{(t - s) L_A} delta_y on a DownstairsGrid: a positive caloric function.

    This is the grid fundamental solution with pole (s, y) (y snapped to the
    nearest node); evolved grids are cached per time and interpolated with
    cubic splines.
    """

    def __init__(self, grid: DownstairsGrid, A, s: float, y, cache: int = 64):
        self.grid = grid
        self.sg = Semigroup(grid, np.asarray(A, dtype=float))
        self.s = float(s)
        delta, self.y = grid.delta(np.asarray(y, dtype=float))
        self._c0 = self.sg.to_eig(grid.to_spectral(delta))
        self._cache: Dict[float, np.ndarray] = {}
        self._size = cache

    def grid_values(self, t: float) -> np.ndarray:
        t = float(t)
        if t not in self._cache:
            if len(self._cache) >= self._size:
                self._cache.pop(next(iter(self._cache)))
            c = np.exp(-(t - self.s) * self.sg.w) * self._c0
            self._cache[t] = self.grid.to_physical(self.sg.from_eig(c))
        return self._cache[t]

    def __call__(self, t, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
        out = np.empty(len(X))
        for tv in np.unique(t):
            sel = t == tv
            if tv <= self.s:
                out[sel] = 0.0
                continue
            out[sel] = self.grid.interpolate(self.grid_values(tv), X[sel])
        return out


def caloric_grid(system: FieldSystem, oracle: MetricOracle, center, radius: float,
                 active_nodes: int = 129, passive_nodes=(256,), seed: int = 0) -> DownstairsGrid:
    """A grid window around B_X(center, radius), symmetric about the origin."""
    lo, hi = ball_box(oracle, center, radius, seed=seed)
    half = np.maximum(np.abs(lo), np.abs(hi))
    return DownstairsGrid(system, half, active_nodes, passive_nodes)


def control_endpoint(oracle: MetricOracle, x, direction, length: float) -> np.ndarray:
    """exp(length * sum_i direction_i X_i)(x) for a unit direction in R^m."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    u = np.broadcast_to(d * length / oracle.K, (1, oracle.K, oracle.m)).copy()
    return oracle.endpoint(np.asarray(x, dtype=float)[None], u)[0]


def merge_reports(reports: Sequence[HarnackReport]) -> HarnackReport:
    r0 = reports[0]
    return HarnackReport([r for rep in reports for r in rep.ratios],
                         [c for rep in reports for c in rep.center_values],
                         [p for rep in reports for p in rep.sup_points], r0.box, r0.samples)


def euclidean_harnack_oracle(box: HarnackBox, s: float, y) -> float:
    """Exact sup/centre ratio for the heat kernel (4 pi tau)^{-n/2} exp(-|x-y|^2 / 4 tau) of d_1^2 + ... ."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    D = max(float(np.linalg.norm(y - box.x0)) - box.gamma * box.r, 0.0)
    ta, tb = box.waiting_times
    lo, hi = ta - s, tb - s
    if hi <= 0:
        return 0.0
    best_tau = min(max(D ** 2 / (2 * n), max(lo, 1e-300)), hi)
    g = lambda tau, d2: (4 * math.pi * tau) ** (-n / 2) * math.exp(-d2 / (4 * tau))  # noqa: E731
    sup = g(best_tau, D ** 2)
    center = g(box.t0 - s, float(np.sum((box.x0 - y) ** 2)))
    return sup / center


def scale_invariance_study(family: Callable[[float], Sequence[Callable]], template: HarnackBox,
                           oracle: MetricOracle, radii: Sequence[float], samples: int = 400,
                           seed: int = 0) -> dict:
    """M_hat(r) for the solutions ``family(r)`` on the box scaled to r; spread = max/min."""
    per_radius = {}
    for r in radii:
        box = template.scaled(r)
        reps = [parabolic_harnack_check(u, box, oracle, samples, seed=seed) for u in family(r)]
        per_radius[float(r)] = merge_reports(reps).M_hat
    vals = np.array(list(per_radius.values()))
    return {"radii": [float(r) for r in radii], "M_hat": per_radius,
            "spread": float(vals.max() / vals.min())}


def lifted_waiting_sup(u: Callable, lift: CarnotLift, box: HarnackBox, count: int = 2000,
                       seed: int = 0, times: int = 9) -> float:
    """Sampled sup of v(t, z) = u(t, pi(z)) over the lifted waiting region.

    Lifted ball points are endpoints of random admissible controls of length
    <= gamma r started at (x0, 0).
    """
    lo_oracle = MetricOracle(lift.lifted_system, segments=16, restarts=1, seed=seed)
    z0 = np.concatenate([box.x0, np.zeros(lift.p)])
    rng = rng_for(seed, "lifted-sup")
    pts = lo_oracle.reach(z0, box.gamma * box.r, count, seed=seed)
    # shrink the controls radially to fill the ball, not only its boundary
    frac = rng.uniform(0, 1, count) ** (1.0 / lift.Q)
    pts = lift.multiply(np.broadcast_to(z0, pts.shape),
                        lift.dilate(frac[:, None], lift.multiply(lift.inv(np.broadcast_to(z0, pts.shape)), pts)))
    v = lift_function(u, lift.n)
    ta, tb = box.waiting_times
    best = -np.inf
    for t in np.linspace(ta, tb, times):
        best = max(best, float(np.max(v(np.full(count, t), pts))))
    return best


# -- stationary --------------------------------------------------------------------

def _second_order_operator(system: FieldSystem, coeff: Callable, pts: np.ndarray, h: np.ndarray):
    """Coefficients of sum c_ij X_i X_j = sum b_kl d_k d_l + sum e_l d_l at points."""
    n, m = system.n, system.m
    C = np.array([[f.components[k].evaluate(pts) for k in range(n)] for f in system.fields])  # m, n, P
    dC = np.array([[[f.components[k].diff(l).evaluate(pts) for k in range(n)] for l in range(n)]
                   for f in system.fields])  # m, n(l), n(k), P
    c = coeff(pts)  # P, m, m
    b = np.einsum("pij,ikp,jlp->pkl", c, C, C)
    # X_i (X_j u) = sum_k C_ik d_k (sum_l C_jl d_l u) = ... + sum_{k,l} C_ik (d_k C_jl) d_l u
    e = np.einsum("pij,ikp,jlkp->pl", c, C, dC.transpose(0, 2, 1, 3))
    return b, e


def stationary_harnack_check(system: FieldSystem, oracle: MetricOracle, x0, r: float,
                             boundary: Callable, coeff: Optional[Callable] = None,
                             resolution: int = 65, tol: float = 1e-8, method: str = "direct",
                             max_iter: int = 200000, seed: int = 0) -> dict:
    """Solve sum c_ij X_i X_j u = 0 on the grid nodes of B_X(x0, 3r) with u = boundary on the
    discrete boundary layer; return sup/inf of u over the grid nodes of B_X(x0, r).

    method: "direct" (sparse LU, then residual check) or "fixed-point"
    (damped Jacobi iteration).
    """
    n = system.n
    x0 = np.asarray(x0, dtype=float)
    coeff = coeff or (lambda pts: np.broadcast_to(np.eye(system.m), pts.shape[:-1] + (system.m, system.m)))
    lo, hi = ball_box(oracle, x0, 3 * r, seed=seed)
    pad = (hi - lo) * 0.05
    lo, hi = lo - pad, hi + pad
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
    h = np.array([a[1] - a[0] for a in axes])
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = mesh.reshape(-1, n)
    light = oracle.light()
    d = light.distances(np.broadcast_to(x0, pts.shape), pts).d
    shape = mesh.shape[:-1]
    inside = (d < 3 * r).reshape(shape)
    # interior nodes: inside the ball with all stencil neighbours in the grid
    interior = inside.copy()
    for ax in range(n):
        sl = [slice(None)] * n
        sl[ax] = 0
        interior[tuple(sl)] = False
        sl[ax] = -1
        interior[tuple(sl)] = False
    idx = -np.ones(shape, dtype=np.int64)
    I = np.argwhere(interior)
    idx[tuple(I.T)] = np.arange(len(I))
    b, e = _second_order_operator(system, coeff, mesh[tuple(I.T)], h)
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(I))
    known = {}

    def add(row, node, val):
        j = idx[tuple(node)]
        if j >= 0:
            rows.append(row)
            cols.append(j)
            vals.append(val)
        else:
            key = tuple(node)
            if key not in known:
                known[key] = float(boundary(mesh[key][None])[0])
            rhs[row] -= val * known[key]

    for row, node in enumerate(I):
        diag = 0.0
        for k in range(n):
            ek = np.eye(n, dtype=int)[k]
            ckk = b[row, k, k] / h[k] ** 2
            add(row, node + ek, ckk + e[row, k] / (2 * h[k]))
            add(row, node - ek, ckk - e[row, k] / (2 * h[k]))
            diag -= 2 * ckk
            for l in range(k + 1, n):
                el = np.eye(n, dtype=int)[l]
                ckl = 2 * b[row, k, l] / (4 * h[k] * h[l])
                if ckl:
                    add(row, node + ek + el, ckl)
                    add(row, node - ek - el, ckl)
                    add(row, node + ek - el, -ckl)
                    add(row, node - ek + el, -ckl)
        rows.append(row)
        cols.append(row)
        vals.append(diag)
    L = sp.csr_matrix((vals, (rows, cols)), shape=(len(I), len(I)))
    scale = np.abs(L.diagonal())
    if method == "direct":
        u = spla.spsolve(L.tocsc(), rhs)
        iters = 0
    elif method == "fixed-point":
        u = np.zeros(len(I))
        D = L.diagonal()
        omega = 0.8
        iters = 0
        for iters in range(1, max_iter + 1):
            res = rhs - L @ u
            u = u + omega * res / D
            if not np.all(np.isfinite(u)):
                raise SolverDiverged("non-finite iterate")
            if iters % 50 == 0 and np.max(np.abs(res) / scale) < tol:
                break
        else:
            raise SolverDiverged(f"residual above {tol} after {max_iter} iterations")
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = float(np.max(np.abs(L @ u - rhs) / scale)) if len(u) else 0.0
    if not np.isfinite(residual) or residual > tol:
        raise SolverDiverged(f"relative residual {residual:.3g} exceeds {tol}")
    inner = (d < r).reshape(shape)[tuple(I.T)]
    vals_in = u[inner]
    if vals_in.min() <= 0:
        raise SolverDiverged("solution is not positive on the inner ball")
    return {"ratio": float(vals_in.max() / vals_in.min()), "sup": float(vals_in.max()),
            "inf": float(vals_in.min()), "residual": residual, "nodes": int(len(I)),
            "inner_nodes": int(inner.sum()), "iterations": iters}


def pole_family(system: FieldSystem, oracle: MetricOracle, x0, r: float, count: int = 10,
                seed: int = 0, A=None, spread=(1.1, 2.0), active_nodes: int = 129,
                passive_nodes=(256,)) -> List[GridCaloric]:
    """Grid fundamental solutions Gamma_A(.; t0 - r^2, y_k) with poles outside B(x0, r).

    The poles are y_k = exp(rho_k r (cos th_k X_1 + sin th_k X_2 + ...))(x0)
    with rho_k uniform in ``spread``; the pole time is r^2 before t0 = 0, so
    the family is dilation-covariant when x0 = 0.
    """
    x0 = np.asarray(x0, dtype=float)
    A = np.eye(system.m) if A is None else np.asarray(A, dtype=float)
    rng = rng_for(seed, "harnack-poles")
    grid = caloric_grid(system, oracle, x0, (spread[1] + 6) * r, active_nodes, passive_nodes, seed)
    out = []
    for _ in range(count):
        direction = rng.normal(size=system.m)
        rho = rng.uniform(*spread)
        y = control_endpoint(oracle, x0, direction, rho * r)
        out.append(GridCaloric(grid, A, -r ** 2, y))
    return out


def harnack_study(system: FieldSystem, oracle: MetricOracle, template: HarnackBox,
                  radii: Sequence[float], poles: int = 10, samples: int = 400,
                  seed: int = 0, A=None) -> dict:
    """Report {box, radii, per_pole_ratios, M_hat, spread} for the pole family.

    ``per_pole_ratios`` and ``M_hat`` refer to the template radius; the spread
    is max/min of M_hat over ``radii``.
    """
    def family(r):
        return pole_family(system, oracle, template.x0, r, poles, seed, A)

    base = merge_reports([parabolic_harnack_check(u, template, oracle, samples, seed=seed)
                          for u in family(template.r)])
    study = scale_invariance_study(family, template, oracle, radii, samples, seed)
    return {"box": template.to_json(), "radii": study["radii"],
            "per_pole_ratios": [float(v) for v in base.ratios], "M_hat": base.M_hat,
            "M_hat_by_radius": {repr(k): v for k, v in study["M_hat"].items()},
            "spread": study["spread"]}
