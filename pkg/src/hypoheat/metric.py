"""Carnot-Carathéodory distance, ball volumes and the Gaussian-type function E.

Distances are estimated by optimal control over piecewise-constant controls.
Each constant segment is integrated exactly: for homogeneous fields the flow
of ``sum_j u_j X_j`` for unit time is a polynomial in (x, u), so the endpoint
of a K-segment control is a composition of K polynomial maps whose Jacobian
follows from the chain rule. The control length is minimised subject to
hitting the target with a damped minimum-norm Newton iteration, from several
deterministic starts. Every accepted answer comes from a control that reaches
the target, so it is an upper bound on the true distance.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bounds import BoundFit, FitFailure, rng_for
from .fields import FieldSystem
from .lift import lie_series_flow
from .polynomial import PolyMap, Polynomial


class NoConvergence(RuntimeWarning):
    pass


class DegenerateBox(RuntimeError):
    pass


NORMS = ("l2", "l1")


class SegmentMap:
    """Endpoint map x -> exp(sum_j u_j X_j)(x) together with its derivatives."""

    def __init__(self, system: FieldSystem):
        n, m = system.n, system.m
        nv = n + m
        comps = []
        for j in range(n):
            total = Polynomial.zero(nv)
            for i, X in enumerate(system.fields):
                c = X.components[j]
                if c:
                    total = total + c.extend(nv) * Polynomial.variable(nv, n + i)
            comps.append(total)
        self.flow = lie_series_flow(comps, list(range(n)), max(system.sigma))
        dx = [f.diff(k) for f in self.flow for k in range(n)]
        du = [f.diff(n + i) for f in self.flow for i in range(m)]
        self.n, self.m = n, m
        self._value = PolyMap(self.flow)
        self._all = PolyMap(self.flow + dx + du)

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self._value(np.concatenate([x, u], axis=-1))

    def with_derivatives(self, x, u):
        n, m = self.n, self.m
        out = self._all(np.concatenate([x, u], axis=-1))
        val = out[..., :n]
        dx = out[..., n:n + n * n].reshape(out.shape[:-1] + (n, n))
        du = out[..., n + n * n:].reshape(out.shape[:-1] + (n, m))
        return val, dx, du


def homogeneous_norm(x: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """max_j |x_j|^(1/w_j), a δ_λ-homogeneous gauge of degree one."""
    w = np.asarray(weights, dtype=float)
    return np.max(np.abs(x) ** (1.0 / w), axis=-1)


@dataclass
class DistanceResult:
    d: np.ndarray
    converged: np.ndarray
    residual: np.ndarray


class MetricOracle:
    """CC-distance estimator for a homogeneous Hörmander system.

    Parameters
    ----------
    system : FieldSystem
        Fields and dilation weights (the lifted system works as well).
    segments : int
        Number K of constant-control pieces.
    restarts : int
        Deterministic multi-start count.
    tol : float
        Relative accuracy target; also the endpoint residual accepted after
        the final polish is ``1e-9`` at unit scale.
    norm : {"l2", "l1"}
        Control constraint: ``sum a_j^2 <= 1`` or ``sum |a_j| <= 1``.
    """

    def __init__(self, system: FieldSystem, segments: int = 16, restarts: int = 8,
                 tol: float = 1e-3, norm: str = "l2", seed: int = 0,
                 iterations: int = 30, chunk: int = 40000):
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        self.system = system
        self.K = int(segments)
        self.restarts = int(restarts)
        self.tol = float(tol)
        self.norm = norm
        self.seed = int(seed)
        self.iterations = int(iterations)
        self.chunk = int(chunk)
        self.n, self.m = system.n, system.m
        self.weights = np.asarray(system.sigma, dtype=float)
        self.segment = SegmentMap(system)
        used = set()
        for X in system.fields:
            for c in X.components:
                used |= c.variables()
        # coordinates absent from every coefficient: translations along them are symmetries
        self.passive = np.array([j not in used for j in range(self.n)])
        self._cache: Dict[Tuple, Tuple[float, bool]] = {}
        self._lock = threading.Lock()
        self._starts = self._make_starts()

    # -- control helpers -------------------------------------------------
    def _make_starts(self) -> np.ndarray:
        """Restart controls at unit length: smooth low-frequency profiles plus noise."""
        rng = rng_for(self.seed, "metric-starts", self.K, self.m)
        K, m = self.K, self.m
        s = (np.arange(K) + 0.5) / K
        starts = []
        for r in range(self.restarts):
            coef = rng.normal(size=(3, 2, m))
            u = np.zeros((K, m))
            for f in range(3):
                u += coef[f, 0] * np.cos(2 * np.pi * f * s)[:, None] / (f + 1)
                u += coef[f, 1] * np.sin(2 * np.pi * (f + 1) * s)[:, None] / (f + 1)
            u += 0.1 * rng.normal(size=(K, m))
            u /= self._length(u[None])[0]
            starts.append(u)
        return np.array(starts)

    def _length(self, u: np.ndarray) -> np.ndarray:
        """Travel time of a control given as per-segment displacements (..., K, m)."""
        if self.norm == "l2":
            return np.sqrt((u ** 2).sum(-1)).sum(-1)
        return np.abs(u).sum(axis=(-1, -2))

    def endpoint(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        z = np.array(x, dtype=float)
        for k in range(u.shape[-2]):
            z = self.segment(z, u[..., k, :])
        return z

    def _endpoint_jac(self, x, u):
        B = x.shape[0]
        n, m, K = self.n, self.m, self.K
        z = x
        A, G = [], []
        for k in range(K):
            z, dx, du = self.segment.with_derivatives(z, u[:, k, :])
            A.append(dx)
            G.append(du)
        J = np.empty((B, n, K, m))
        P = np.broadcast_to(np.eye(n), (B, n, n)).copy()
        for k in range(K - 1, -1, -1):
            J[:, :, k, :] = P @ G[k]
            P = P @ A[k]
        return z, J.reshape(B, n, K * m)

    def _solve(self, x: np.ndarray, y: np.ndarray, u0: np.ndarray):
        """Damped minimum-norm Newton iteration for the constrained length problem."""
        B = x.shape[0]
        K, m, n = self.K, self.m, self.n
        u = u0.reshape(B, K * m).copy()
        eye = np.eye(n)
        for it in range(self.iterations + 8):
            polish = it >= self.iterations
            z, J = self._endpoint_jac(x, u.reshape(B, K, m))
            r = z - y
            if self.norm == "l1":
                w = np.abs(u) + 1e-6
            else:
                w = np.ones_like(u)
            JW = J * w[:, None, :]
            M = JW @ J.transpose(0, 2, 1) + 1e-12 * eye
            if polish:
                lam = np.linalg.solve(M, -r[..., None])[..., 0]
                step = np.einsum("bnk,bn->bk", JW, lam)
                u = u + step
                continue
            rhs = np.einsum("bnk,bk->bn", J, u) - r
            lam = np.linalg.solve(M, rhs[..., None])[..., 0]
            target = np.einsum("bnk,bn->bk", JW, lam)
            step = target - u
            # trust region relative to the current control size
            scale = np.sqrt((u ** 2).sum(-1)) + 0.05
            sn = np.sqrt((step ** 2).sum(-1))
            alpha = np.minimum(1.0, 0.5 * scale / np.maximum(sn, 1e-300))
            u = u + alpha[:, None] * step
        z = self.endpoint(x, u.reshape(B, K, m))
        res = np.sqrt(((z - y) ** 2).sum(-1))
        return u.reshape(B, K, m), res

    # -- public API ------------------------------------------------------
    def _normalise(self, x, y):
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        shift = np.where(self.passive, x, 0.0)
        x = x - shift
        y = y - shift
        s = np.maximum(homogeneous_norm(x, self.weights), homogeneous_norm(y, self.weights))
        s = np.where(s > 0, s, 1.0)
        inv = (1.0 / s)[:, None] ** self.weights
        return x * inv, y * inv, s

    def _directed(self, x, y) -> DistanceResult:
        """One-directional estimates for normalised pairs (batch)."""
        B = x.shape[0]
        R = self.restarts
        best = np.full(B, np.inf)
        best_res = np.full(B, np.inf)
        sep = homogeneous_norm(y - x, self.weights)
        sep = np.maximum(sep, 1e-3)
        for r in range(R):
            u0 = self._starts[r][None] * sep[:, None, None]
            for lo in range(0, B, self.chunk):
                sl = slice(lo, min(B, lo + self.chunk))
                u, res = self._solve(x[sl], y[sl], u0[sl])
                L = self._length(u)
                ok = res < 1e-9
                better = ok & (L < best[sl])
                best[sl] = np.where(better, L, best[sl])
                best_res[sl] = np.minimum(best_res[sl], res)
        return DistanceResult(best, np.isfinite(best), best_res)

    def distances(self, x, y, symmetrize: bool = True) -> DistanceResult:
        """Batch CC-distance estimates for rows of ``x`` and ``y`` (shape (B, n))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x, y = np.broadcast_arrays(x, y)
        B = x.shape[0]
        same = np.all(x == y, axis=-1)
        out = np.zeros(B)
        conv = np.ones(B, dtype=bool)
        res = np.zeros(B)
        idx = np.nonzero(~same)[0]
        if idx.size:
            xa, ya, s = self._normalise(x[idx], y[idx])
            if symmetrize:
                # same scale for both directions keeps the pair exactly homogeneous
                xs = np.concatenate([xa, ya])
                ys = np.concatenate([ya, xa])
                dr = self._directed(xs, ys)
                k = idx.size
                d = np.minimum(dr.d[:k], dr.d[k:])
                r_ = np.minimum(dr.residual[:k], dr.residual[k:])
            else:
                dr = self._directed(xa, ya)
                d, r_ = dr.d, dr.residual
            out[idx] = d * s
            conv[idx] = np.isfinite(d)
            res[idx] = r_
        return DistanceResult(out, conv, res)

    def distance(self, x, y) -> Tuple[float, bool]:
        """Cached single-pair estimate ``(d_hat, converged)``."""
        key = (tuple(np.round(np.asarray(x, float), 14)), tuple(np.round(np.asarray(y, float), 14)))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        r = self.distances(np.asarray(x)[None], np.asarray(y)[None])
        val = (float(r.d[0]), bool(r.converged[0]))
        with self._lock:
            self._cache.setdefault(key, val)
        return val

    def light(self) -> "MetricOracle":
        """Cheaper estimator (4 restarts, 20 iterations) used for Monte Carlo membership."""
        if getattr(self, "_light", None) is None:
            self._light = MetricOracle(self.system, self.K, min(4, self.restarts), self.tol,
                                       self.norm, self.seed, iterations=20, chunk=self.chunk)
        return self._light

    def reach(self, x, length: float, count: int, seed: int = 0, mix=None) -> np.ndarray:
        """Endpoints of ``count`` random admissible controls of the given length from x.

        ``mix`` (m x m) replaces every control alpha by mix @ alpha, i.e. the
        controls drive the fields Y_k = sum_i mix[i, k] X_i.
        """
        rng = rng_for(self.seed, "reach", seed)
        K, m = self.K, self.m
        u = rng.normal(size=(count, K, m))
        # mix smooth and rough controls; smooth ones reach farther in bracket directions
        s = (np.arange(K) + 0.5) / K
        smooth = (rng.normal(size=(count, 1, m)) * np.cos(2 * np.pi * s)[None, :, None]
                  + rng.normal(size=(count, 1, m)) * np.sin(2 * np.pi * s)[None, :, None]
                  + rng.normal(size=(count, 1, m)))
        u = np.where(rng.random((count, 1, 1)) < 0.5, u, smooth)
        u *= (length / self._length(u))[:, None, None]
        if mix is not None:
            u = u @ np.asarray(mix, dtype=float).T
        x = np.broadcast_to(np.asarray(x, dtype=float), (count, self.n))
        return self.endpoint(x, u)


def parabolic_distance(oracle: MetricOracle, p, q) -> float:
    """d_P((t,x),(s,y)) = d_X(x,y) + |t-s|^(1/2)."""
    (t, x), (s, y) = p, q
    return oracle.distance(x, y)[0] + math.sqrt(abs(t - s))


# -- ball volumes ----------------------------------------------------------

@dataclass
class VolumeEstimate:
    center: Tuple[float, ...]
    r: float
    volume: float
    stderr: float
    samples: int
    seed: int
    box: Tuple[Tuple[float, float], ...]
    boundary_hit_rate: float
    unconverged: int = 0


class Gauge:
    """Tabulated N(theta) = d(0, theta) on the unit sphere of the cube gauge.

    Since d(0, δ_λ θ) = λ d(0, θ), the distance from the origin to any y is
    h(y) N(θ(y)) with h the homogeneous norm and θ = δ_{1/h(y)} y on the
    surface of [-1, 1]^n. The table is a grid on each of the 2n faces,
    interpolated multilinearly; only valid for centres fixed by the dilations
    (the origin and its translates along passive coordinates).
    """

    def __init__(self, oracle: MetricOracle, resolution: int = 65):
        self.oracle = oracle
        n = oracle.n
        self.n = n
        self.res = resolution
        g = np.linspace(-1.0, 1.0, resolution)
        self.grid = g
        pts, self.faces = [], []
        for axis in range(n):
            for sign in (-1.0, 1.0):
                others = [k for k in range(n) if k != axis]
                mesh = np.meshgrid(*([g] * (n - 1)), indexing="ij") if n > 1 else []
                P = np.empty((resolution ** (n - 1), n))
                P[:, axis] = sign
                for c, k in enumerate(others):
                    P[:, k] = mesh[c].ravel()
                self.faces.append((axis, sign, others, len(pts) and sum(len(p) for p in pts)))
                pts.append(P)
        allpts = np.concatenate(pts)
        # unique points (edges are shared between faces)
        uniq, inverse = np.unique(np.round(allpts, 12), axis=0, return_inverse=True)
        dr = oracle.distances(np.zeros_like(uniq), uniq)
        self.values = dr.d[inverse.ravel()]
        self.unconverged = int((~dr.converged).sum())
        self.points = allpts
        self._offsets = np.cumsum([0] + [len(p) for p in pts])

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        w = self.oracle.weights
        h = homogeneous_norm(y, w)
        out = np.zeros(len(y))
        nz = h > 0
        th = y[nz] / h[nz, None] ** w
        # face of the cube: coordinate with |theta_j| = 1 (largest ratio)
        axis = np.argmax(np.abs(th), axis=-1)
        sign = np.sign(th[np.arange(len(th)), axis])
        vals = np.empty(len(th))
        n, R = self.n, self.res
        for f, (ax, sg, others, _) in enumerate(self.faces):
            sel = (axis == ax) & (sign == sg)
            if not sel.any():
                continue
            table = self.values[self._offsets[f]:self._offsets[f + 1]].reshape((R,) * (n - 1))
            if n == 1:
                vals[sel] = table
                continue
            coords = th[sel][:, others]
            pos = (np.clip(coords, -1, 1) + 1) / 2 * (R - 1)
            i0 = np.clip(np.floor(pos).astype(int), 0, R - 2)
            frac = pos - i0
            acc = np.zeros(sel.sum())
            for corner in range(2 ** (n - 1)):
                bits = [(corner >> b) & 1 for b in range(n - 1)]
                wgt = np.ones(sel.sum())
                idx = []
                for b, bit in enumerate(bits):
                    wgt *= frac[:, b] if bit else 1 - frac[:, b]
                    idx.append(i0[:, b] + bit)
                acc += wgt * table[tuple(idx)]
            vals[sel] = acc
        out[nz] = h[nz] * vals
        return out


def _fixed_by_dilations(oracle: MetricOracle, x) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all((x == 0) | oracle.passive))


def ball_box(oracle: MetricOracle, x, r: float, seed: int = 0, count: int = 2048):
    """Bounding box of B(x, r) from endpoints of random admissible controls, padded."""
    pts = oracle.reach(x, r, count, seed=seed)
    x = np.asarray(x, dtype=float)
    lo = np.minimum(pts.min(0), x)
    hi = np.maximum(pts.max(0), x)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * 1.25
    if np.any(half <= 1e-14 * max(1.0, r)):
        raise DegenerateBox(f"bounding box collapsed: half-widths {half}")
    return mid - half, mid + half


def ball_volume(oracle: MetricOracle, x, r: float, samples: int = 4000, seed: int = 0,
                gauge: Optional[Gauge] = None, max_expand: int = 6) -> VolumeEstimate:
    """Monte Carlo estimate of |B_X(x, r)| with its standard error.

    The box comes from :func:`ball_box` and is enlarged until the fraction of
    ball points in its outer 5% band drops below 1e-3. For centres fixed by
    the dilations a :class:`Gauge` table may replace direct distance solves.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if samples < 1000:
        raise ValueError("need at least 10^3 samples")
    x = np.asarray(x, dtype=float)
    lo, hi = ball_box(oracle, x, r, seed=seed)
    rng = rng_for(oracle.seed, "ball", seed, tuple(np.round(x, 12)), round(r, 12), samples)
    use_gauge = gauge is not None and _fixed_by_dilations(oracle, x)
    for _ in range(max_expand):
        u = rng.random((samples, oracle.n))
        y = lo + u * (hi - lo)
        if use_gauge:
            d = gauge(y - np.where(oracle.passive, x, 0.0))
            conv = np.ones(samples, dtype=bool)
        else:
            dr = oracle.light().distances(np.broadcast_to(x, y.shape), y)
            d, conv = dr.d, dr.converged
        inside = d < r
        band = np.any((u < 0.05) | (u > 0.95), axis=1)
        hit = (inside & band).sum() / max(band.sum(), 1)
        if hit < 1e-3:
            break
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * 1.3
        lo, hi = mid - half, mid + half
    vol_box = float(np.prod(hi - lo))
    frac = inside.mean()
    return VolumeEstimate(
        center=tuple(float(v) for v in x), r=float(r), volume=vol_box * frac,
        stderr=vol_box * math.sqrt(frac * (1 - frac) / samples), samples=samples, seed=seed,
        box=tuple(zip(lo.tolist(), hi.tolist())), boundary_hit_rate=float(hit),
        unconverged=int((~conv).sum()),
    )


@dataclass
class BallVolumeTable:
    center: Tuple[float, ...]
    rows: List[VolumeEstimate]

    @property
    def radii(self):
        return [e.r for e in self.rows]

    def is_increasing(self) -> bool:
        v = [e.volume for e in self.rows]
        return all(b > a for a, b in zip(v, v[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "volume", "stderr", "samples", "seed"])
            for e in self.rows:
                w.writerow([repr(float(e.r)), repr(float(e.volume)), repr(float(e.stderr)), int(e.samples), int(e.seed)])


def volume_table(oracle: MetricOracle, x, radii, samples: int = 4000, seed: int = 0,
                 gauge: Optional[Gauge] = None) -> BallVolumeTable:
    rows = [ball_volume(oracle, x, r, samples, seed=seed + i, gauge=gauge)
            for i, r in enumerate(radii)]
    return BallVolumeTable(tuple(float(v) for v in np.asarray(x, float)), rows)


def volume_scaling_check(oracle: MetricOracle, r: float, lam: float = 2.0,
                         samples: int = 100000, seed: int = 0,
                         gauge: Optional[Gauge] = None) -> dict:
    """Compare |B(0, lam r)| with lam^q |B(0, r)| in units of combined standard error."""
    q = float(np.sum(oracle.weights))
    zero = np.zeros(oracle.n)
    a = ball_volume(oracle, zero, r, samples, seed=seed, gauge=gauge)
    b = ball_volume(oracle, zero, lam * r, samples, seed=seed + 1, gauge=gauge)
    diff = b.volume - lam ** q * a.volume
    se = math.hypot(b.stderr, lam ** q * a.stderr)
    return {"small": a, "large": b, "ratio": b.volume / a.volume, "expected": lam ** q,
            "z": abs(diff) / se if se > 0 else 0.0}


def verify_doubling(oracle: MetricOracle, probes, samples: int = 4000, seed: int = 0,
                    gauge: Optional[Gauge] = None) -> BoundFit:
    """Tightest (gamma1, gamma2) with gamma1 (r/rho)^n <= |B(x,r)|/|B(x,rho)| <= gamma2 (r/rho)^q."""
    n = oracle.n
    q = float(np.sum(oracle.weights))
    lows, highs, rows = [], [], []
    for i, (x, r, rho) in enumerate(probes):
        if not r > rho > 0:
            raise ValueError("probes need r > rho > 0")
        big = ball_volume(oracle, x, r, samples, seed=seed + 2 * i, gauge=gauge)
        small = ball_volume(oracle, x, rho, samples, seed=seed + 2 * i + 1, gauge=gauge)
        if small.volume <= 0:
            raise FitFailure("empty ball estimate", probe=(x, rho))
        ratio = big.volume / small.volume
        lows.append(ratio / (r / rho) ** n)
        highs.append(ratio / (r / rho) ** q)
        rows.append({"x": list(map(float, x)), "r": r, "rho": rho, "ratio": ratio})
    if not rows:
        return BoundFit("doubling", {"gamma1": float("nan"), "gamma2": float("nan")}, 0)
    g1 = float(min(lows))
    g2 = float(max(highs))
    if not (np.isfinite(g1) and np.isfinite(g2)) or g1 <= 0:
        raise FitFailure("no finite doubling fit", probe=rows[int(np.argmin(lows))])
    return BoundFit("doubling", {"gamma1": g1, "gamma2": g2}, len(rows),
                    margin=1.0, tightest=rows[int(np.argmax(highs))], extra={"probes": rows})


def verify_volume_lower_bound(oracle: MetricOracle, probes, samples: int = 4000,
                              seed: int = 0, gauge: Optional[Gauge] = None) -> BoundFit:
    """Largest omega with |B(x, r)| >= omega r^q over the probes."""
    q = float(np.sum(oracle.weights))
    vals = []
    for i, (x, r) in enumerate(probes):
        est = ball_volume(oracle, x, r, samples, seed=seed + i, gauge=gauge)
        vals.append(est.volume / r ** q)
    if not vals:
        return BoundFit("volume-lower", {"omega": float("nan")}, 0)
    omega = float(min(vals))
    if not omega > 0:
        raise FitFailure("omega fit is not positive", probe=probes[int(np.argmin(vals))])
    return BoundFit("volume-lower", {"omega": omega}, len(vals), margin=1.0,
                    tightest=int(np.argmin(vals)))


# -- volume function and Gaussian E ------------------------------------------

class VolumeFunction:
    """|B_X(x, r)| for arbitrary centres via homogeneity and translation symmetry.

    |B(x, r)| = r^q U(δ_{1/r} x) where U(w) = |B(w, 1)| depends only on the
    active (non-passive) coordinates of w. U is tabulated on a tensor grid of
    active coordinates in [-W, W] and extended beyond by power-law
    extrapolation along rays; with no active coordinate U is a single number.
    """

    def __init__(self, oracle: MetricOracle, half_width: float = 3.0, nodes: int = 13,
                 samples: int = 3000, seed: int = 0, gauge: Optional[Gauge] = None):
        self.oracle = oracle
        self.q = float(np.sum(oracle.weights))
        self.active = np.nonzero(~oracle.passive)[0]
        self.W = float(half_width)
        self.samples = samples
        k = len(self.active)
        if k > 2:
            raise NotImplementedError("volume tables support at most two active coordinates")
        if k == 0:
            est = ball_volume(oracle, np.zeros(oracle.n), 1.0, samples, seed=seed, gauge=gauge)
            self.grid = None
            self.table = np.array(est.volume)
            self.stderr = np.array(est.stderr)
            return
        self.grid = np.linspace(-self.W, self.W, nodes)
        mesh = np.meshgrid(*([self.grid] * k), indexing="ij")
        centers = np.zeros((nodes ** k, oracle.n))
        for c, j in enumerate(self.active):
            centers[:, j] = mesh[c].ravel()
        vols, errs = [], []
        for i, c in enumerate(centers):
            est = ball_volume(oracle, c, 1.0, samples, seed=seed + i, gauge=gauge)
            vols.append(est.volume)
            errs.append(est.stderr)
        self.table = np.array(vols).reshape((nodes,) * k)
        self.stderr = np.array(errs).reshape((nodes,) * k)

    def _U(self, w: np.ndarray) -> np.ndarray:
        if self.grid is None:
            return np.full(w.shape[0], float(self.table))
        a = w[:, self.active]
        g = self.grid
        R = len(g)
        # points outside the table: rescale onto the boundary and extrapolate with
        # the growth exponent measured along the ray
        rad = np.max(np.abs(a), axis=1) / self.W
        out_side = rad > 1
        a_in = np.where(out_side[:, None], a / np.maximum(rad, 1)[:, None], a)
        a_mid = np.where(out_side[:, None], 0.7 * a_in, a_in)
        v_edge = self._interp(a_in)
        v_mid = self._interp(a_mid)
        expo = np.log(np.maximum(v_edge, 1e-300) / np.maximum(v_mid, 1e-300)) / math.log(1 / 0.7)
        expo = np.clip(expo, 0.0, self.q)
        return np.where(out_side, v_edge * np.maximum(rad, 1) ** expo, v_edge)

    def _interp(self, a: np.ndarray) -> np.ndarray:
        g = self.grid
        R = len(g)
        k = a.shape[1]
        pos = (np.clip(a, -self.W, self.W) + self.W) / (2 * self.W) * (R - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, R - 2)
        frac = pos - i0
        acc = np.zeros(len(a))
        for corner in range(2 ** k):
            wgt = np.ones(len(a))
            idx = []
            for b in range(k):
                bit = (corner >> b) & 1
                wgt *= frac[:, b] if bit else 1 - frac[:, b]
                idx.append(i0[:, b] + bit)
            acc += wgt * self.table[tuple(idx)]
        return acc

    def __call__(self, x, r) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.broadcast_to(np.asarray(r, dtype=float), (x.shape[0],))
        w = x / r[:, None] ** self.oracle.weights
        return r ** self.q * self._U(w)


class GaussianE:
    """E(x, y, t) = |B_X(x, sqrt t)|^{-1} exp(-d_X(x, y)^2 / t)."""

    def __init__(self, oracle: MetricOracle, volume: VolumeFunction):
        self.oracle = oracle
        self.volume = volume
        self._dcache: Dict[Tuple, float] = {}
        self._lock = threading.Lock()

    def distances(self, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x, y = np.broadcast_arrays(x, y)
        keys = [tuple(np.round(np.concatenate([a, b]), 12)) for a, b in zip(x, y)]
        with self._lock:
            missing = [i for i, k in enumerate(keys) if k not in self._dcache]
        if missing:
            uniq = {}
            for i in missing:
                uniq.setdefault(keys[i], i)
            idx = np.array(list(uniq.values()))
            dr = self.oracle.distances(x[idx], y[idx])
            with self._lock:
                for i, d in zip(idx, dr.d):
                    self._dcache.setdefault(keys[i], float(d))
        with self._lock:
            return np.array([self._dcache[k] for k in keys])

    def __call__(self, x, y, t, d: Optional[np.ndarray] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x, y = np.broadcast_arrays(x, y)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        if np.any(t <= 0):
            raise ValueError("t must be positive")
        if d is None:
            d = self.distances(x, y)
        return np.exp(-d ** 2 / t) / self.volume(x, np.sqrt(t))


def verify_E_properties(E: GaussianE, xs, ys, ts, seed: int = 0,
                        samples: int = 20000, cap: float = 1e6) -> Dict[str, BoundFit]:
    """Fitted constants for the six structural inequalities of E over a probe grid.

    ``xs``/``ys`` are matched point lists and ``ts`` a list of times. The two
    integral items use Monte Carlo over a box that covers the Gaussian tails.
    """
    xs = np.atleast_2d(np.asarray(xs, float))
    ys = np.atleast_2d(np.asarray(ys, float))
    ts = np.asarray(ts, float)
    q = E.volume.q
    P = len(xs) * len(ts)
    X = np.repeat(xs, len(ts), axis=0)
    Y = np.repeat(ys, len(ts), axis=0)
    T = np.tile(ts, len(xs))
    d = E.distances(X, Y)
    out: Dict[str, BoundFit] = {}

    def fit(name, ratio, key):
        ratio = np.asarray(ratio, float)
        if ratio.size == 0:
            out[name] = BoundFit(name, {key: float("nan")}, 0)
            return
        c = float(np.max(ratio))
        if not np.isfinite(c) or c >= cap:
            raise FitFailure(f"{name}: no constant below {cap:g}", probe=int(np.argmax(ratio)))
        out[name] = BoundFit(name, {key: c}, ratio.size, margin=1.0, tightest=int(np.argmax(ratio)))

    e_t = E(X, Y, T, d)
    # (1) E(x,y,t) <= c beta^{q/2} E(x,y,beta t)
    r1 = [e_t / (b ** (q / 2) * E(X, Y, b * T, d)) for b in (2.0, 8.0)]
    fit("E-beta", np.concatenate(r1) if P else [], "c")
    # (2) (d^2/t)^mu E(x,y,lam t) <= c_mu lam^mu E(x,y,2 lam t), mu = 1
    r2 = [(d ** 2 / T) * E(X, Y, lam * T, d) / (lam * E(X, Y, 2 * lam * T, d)) for lam in (0.5, 1.0, 2.0)]
    fit("E-moment", np.concatenate(r2) if P else [], "c_mu")
    # (3) t^{-mu} E <= c_{mu,eps} on d^2 + t >= eps, mu = 1, eps = 0.5
    sel = d ** 2 + T >= 0.5
    fit("E-time", (e_t / T)[sel], "c_mu_eps")
    # (4) E(x,y,t) exp(mu d(0,y)^2) <= c0 E(x,y,2t) exp(2 mu d(0,x)^2), mu = 1/(4 Tmax)
    mu = 1.0 / (4 * ts.max()) if ts.size else 0.0
    zero = np.zeros_like(X)
    d0y = E.distances(zero, Y)
    d0x = E.distances(zero, X)
    fit("E-growth", e_t * np.exp(mu * d0y ** 2) / (E(X, Y, 2 * T, d) * np.exp(2 * mu * d0x ** 2)), "c0")
    # (5) and (6): integrals over zeta / y by Monte Carlo
    rng = rng_for(E.oracle.seed, "E-props", seed)
    w = E.oracle.weights
    integ6, integ5 = [], []
    for t in ts:
        half = 6.0 * math.sqrt(t) ** w + 1.0 * (np.abs(xs).max(0) if len(xs) else 0)
        for x0, y0 in zip(xs, ys):
            Z = x0 + (rng.random((samples, len(w))) * 2 - 1) * half
            vol = float(np.prod(2 * half))
            dz = E.distances(np.broadcast_to(x0, Z.shape), Z)
            integ6.append(vol * np.mean(E(np.broadcast_to(x0, Z.shape), Z, t, dz)))
            dzy = E.distances(Z, np.broadcast_to(y0, Z.shape))
            lhs = vol * np.mean(E(np.broadcast_to(x0, Z.shape), Z, t, dz) * E(Z, np.broadcast_to(y0, Z.shape), t, dzy))
            integ5.append(lhs / E(x0[None], y0[None], 4 * t)[0])
    fit("E-reproduction", integ5, "Theta")
    fit("E-integral", integ6, "sigma")
    return out


def exp_tail_integral(oracle: MetricOracle, x, pwr: float = 1.0, shells: int = 7,
                      samples: int = 20000, seed: int = 0,
                      gauge: Optional[Gauge] = None) -> dict:
    """Estimate of the integral of exp(-pwr d(x,y)^2) dy over R^n.

    The core {d < 1} and dyadic shells {2^k <= d < 2^{k+1}}, k < ``shells``,
    are integrated by Monte Carlo over ball boxes. Beyond the last shell the
    integrand is bounded by exp(-pwr 4^k) |B(x, 2^{k+1})| and the ball volume
    by the measured doubling growth (r/rho)^q, which gives a geometric tail.
    """
    x = np.asarray(x, dtype=float)
    q = float(np.sum(oracle.weights))
    use_gauge = gauge is not None and _fixed_by_dilations(oracle, x)
    rng = rng_for(oracle.seed, "exp-tail", seed, pwr)
    total, var = 0.0, 0.0
    parts = []
    radii = [1.0] + [2.0 ** (k + 1) for k in range(shells)]
    inner = 0.0
    for i, R in enumerate(radii):
        lo, hi = ball_box(oracle, x, R, seed=seed + i)
        u = rng.random((samples, oracle.n))
        y = lo + u * (hi - lo)
        if use_gauge:
            d = gauge(y - np.where(oracle.passive, x, 0.0))
        else:
            d = oracle.light().distances(np.broadcast_to(x, y.shape), y).d
        r_in = 0.0 if i == 0 else radii[i - 1]
        f = np.where((d >= r_in) & (d < R), np.exp(-pwr * d ** 2), 0.0)
        vol = float(np.prod(hi - lo))
        val = vol * f.mean()
        err = vol * f.std() / math.sqrt(samples)
        parts.append((r_in, R, val, err))
        total += val
        var += err ** 2
    # tail: shells k >= shells, each <= exp(-pwr 4^k) |B(x, 2^{k+1})|
    vol_last = ball_volume(oracle, x, radii[-1], 4000, seed=seed + 97, gauge=gauge).volume
    tail = 0.0
    for k in range(shells, shells + 60):
        term = math.exp(-pwr * 4.0 ** k) * vol_last * (2.0 ** (k + 1) / radii[-1]) ** q
        tail += term
        if term < 1e-300:
            break
    return {"value": total, "stderr": math.sqrt(var), "tail_bound": tail, "shells": parts}
