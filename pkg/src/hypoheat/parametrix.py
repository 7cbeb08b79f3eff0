"""Variable-coefficient heat kernels by the Levi parametrix method.

For H = sum a_ij(t,x) X_i X_j - d/dt the kernel is sought as

    Gamma(t,x;s,y) = Z(t,x;s,y) + int_s^t int Z(t,x;tau,zeta) Phi(tau,zeta;s,y) dzeta dtau,

where Z(.;s,y) is the kernel of the operator frozen at the pole (s,y) and Phi
solves the Volterra equation Phi = Phi_0 + int int Phi_0 Phi with
Phi_0(t,x;s,y) = H Z(.;s,y)(t,x). The series Phi = sum_k Phi_k,
Phi_{k+1} = int int Phi_0 Phi_k, is truncated at order J.

Discretisation
--------------
All space integrals are grid sums on a DownstairsGrid. Because Z(t,x;tau,zeta)
only depends on zeta through the frozen matrix A(tau,zeta), the frozen
matrices are interpolated multilinearly on a lattice of spacing ``quantum``
in the entries that actually vary,

    A(tau,zeta) ~ sum_c w_c(tau,zeta) A_c,

and every space integral becomes a sum of constant-coefficient semigroups
applied to grid functions:

    int Z(t,.;tau,zeta) g(zeta) dzeta ~ sum_c e^{(t-tau) L_c}[w_c(tau) g].

Time integrals use graded nodes tau_k = t0 + (T - t0)(k/n)^{2/alpha}, linear
interpolation of the integrand's grid data between nodes and exact
integration of the exponentials. For constant coefficients Phi_0 vanishes
identically, so the pipeline returns the frozen kernel itself.

The final evaluator uses the lifted/projected frozen kernel for Z (exact
frozen matrix at the pole) and the grid potential for the correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bounds import BoundFit, FitFailure, rng_for
from .expr import Expression, parse_expression
from .fields import FieldSystem
from .kernel import (EllipticMatrix, FieldFlows, FrozenKernelCache, GridConfig, NotElliptic,
                     apply_operator_fd, field_derivative_fd)
from .lift import CarnotLift, build_lift
from .metric import GaussianE, MetricOracle
from .semigroup import DownstairsGrid, Semigroup, phi_weights


class ParametrixError(RuntimeError):
    pass


class SingularQuadrature(ParametrixError):
    pass


class TruncationNotConverged(ParametrixError):
    def __init__(self, indicator: float, tol: float, norms):
        super().__init__(f"last Volterra term is {indicator:.3g} of the first (tolerance {tol:g}); "
                         f"term norms {['%.3g' % v for v in norms]}")
        self.indicator = indicator
        self.norms = list(norms)


class GrowthBudgetExceeded(ParametrixError):
    pass


# -- coefficients ------------------------------------------------------------------

class CoefficientField:
    """Symmetric matrix A(t, x) of expressions over (t, x1..xn).

    Parameters
    ----------
    entries : dict mapping (i, j) with i <= j (0-based) to Expression.
        Missing diagonal entries default to 1, missing off-diagonal ones to 0.
    m, n : matrix size and space dimension.
    alpha : Hölder exponent used for the time grading.
    Lambda : ellipticity bound.
    """

    def __init__(self, entries: Dict[Tuple[int, int], Expression], m: int, n: int,
                 alpha: float = 1.0, Lambda: float = 4.0):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.m = m
        self.n = n
        self.alpha = float(alpha)
        self.Lambda = float(Lambda)
        self.entries: Dict[Tuple[int, int], Expression] = {}
        for i in range(m):
            for j in range(i, m):
                e = entries.get((i, j), entries.get((j, i)))
                if e is None:
                    e = parse_expression("1" if i == j else "0", n)
                self.entries[(i, j)] = e

    @classmethod
    def parse(cls, text: str, m: int, n: int, alpha: float = 1.0, Lambda: float = 4.0) -> "CoefficientField":
        """Lines ``aij = expression`` (1-based indices); ``alpha = ...`` and ``Lambda = ...``
        override the defaults; ``#`` starts a comment."""
        entries = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"cannot parse coefficient line {raw!r}")
            lhs, rhs = (s.strip() for s in line.split("=", 1))
            if lhs == "alpha":
                alpha = float(rhs)
            elif lhs == "Lambda":
                Lambda = float(rhs)
            elif len(lhs) == 3 and lhs[0] == "a" and lhs[1:].isdigit():
                i, j = int(lhs[1]) - 1, int(lhs[2]) - 1
                if not (0 <= i < m and 0 <= j < m):
                    raise ValueError(f"entry {lhs} outside a {m}x{m} matrix")
                entries[(min(i, j), max(i, j))] = parse_expression(rhs, n)
            else:
                raise ValueError(f"unknown coefficient {lhs!r}")
        return cls(entries, m, n, alpha, Lambda)

    @classmethod
    def constant(cls, A, n: int, alpha: float = 1.0, Lambda: float = 4.0) -> "CoefficientField":
        A = np.asarray(A, dtype=float)
        m = A.shape[0]
        entries = {(i, j): parse_expression(repr(float(A[i, j])), n) for i in range(m) for j in range(i, m)}
        return cls(entries, m, n, alpha, Lambda)

    def __call__(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        out = np.zeros(shape + (self.m, self.m))
        for (i, j), e in self.entries.items():
            v = e(t, x)
            out[..., i, j] = v
            out[..., j, i] = v
        return out

    def entry(self, i: int, j: int, t, x) -> np.ndarray:
        return self.entries[(min(i, j), max(i, j))](t, x)

    @property
    def is_constant(self) -> bool:
        return all(e.is_constant for e in self.entries.values())

    def varying_entries(self) -> List[Tuple[int, int]]:
        return [k for k, e in self.entries.items() if not e.is_constant]

    def check_ellipticity(self, t, x) -> None:
        ev = np.linalg.eigvalsh(self(t, x))
        lo, hi = ev.min(), ev.max()
        if lo < 1 / self.Lambda * (1 - 1e-12) or hi > self.Lambda * (1 + 1e-12):
            raise NotElliptic(f"eigenvalues in [{lo:.4g}, {hi:.4g}] leave [1/{self.Lambda}, {self.Lambda}]")

    def hoelder_norm(self, oracle: MetricOracle, samples: int = 10000, seed: int = 0,
                     radius: float = 2.0, T: float = 1.0) -> float:
        """Sampled max of |a(t,x) - a(s,y)| / (d_X(x,y)^alpha + |t-s|^{alpha/2}) over entries.

        Pairs are drawn near each other (most Hölder quotients are attained at
        short range) inside the box |x_j| <= radius^{sigma_j}.
        """
        rng = rng_for(seed, "hoelder")
        w = np.asarray(oracle.weights, dtype=float)
        x = rng.uniform(-1, 1, size=(samples, self.n)) * radius ** w
        y = x + rng.normal(size=(samples, self.n)) * 0.3 ** w
        t = rng.uniform(0, T, samples)
        s = np.clip(t + rng.normal(scale=0.1, size=samples), 0, T)
        d = oracle.light().distances(x, y).d
        den = d ** self.alpha + np.abs(t - s) ** (self.alpha / 2)
        best = 0.0
        for e in self.entries.values():
            if e.is_constant:
                continue
            num = np.abs(e(t, x) - e(s, y))
            ok = den > 1e-12
            best = max(best, float(np.max(num[ok] / den[ok])))
        return best

    def to_json(self) -> dict:
        return {f"a{i + 1}{j + 1}": str(e) for (i, j), e in self.entries.items()} | {
            "alpha": self.alpha, "Lambda": self.Lambda}


# -- configuration --------------------------------------------------------------------

def parametrix_kernel_config() -> GridConfig:
    """Lifted-kernel resolution used for the frozen kernels Z of the final evaluator."""
    return GridConfig(levels=(0.25, 0.5, 1.0), active_nodes=129, default_passive=48)


@dataclass
class LeviConfig:
    order: int = 3
    time_nodes: int = 12
    active_nodes: int = 97
    passive_nodes: Tuple[int, ...] = (128,)
    width: float = 6.0
    margin: float = 1.5
    quantum: float = 0.05
    truncation_tol: float = 1e-2
    kernel: GridConfig = field(default_factory=parametrix_kernel_config)


def graded_nodes(t0: float, T: float, count: int, alpha: float) -> np.ndarray:
    """t0 + (T - t0)(k/count)^{2/alpha}, k = 0..count (graded toward t0)."""
    if count < 2:
        raise SingularQuadrature("at least two time intervals are needed")
    g = 2.0 / alpha
    if g < 1:
        raise SingularQuadrature("grading exponent below 1 cannot absorb the endpoint singularity")
    k = np.arange(count + 1) / count
    return t0 + (T - t0) * k ** g


# -- the engine ------------------------------------------------------------------------

class _Corner:
    __slots__ = ("index", "A", "sg")

    def __init__(self, index, A, sg):
        self.index = index
        self.A = A
        self.sg = sg


class LeviEngine:
    """Shared grid, frozen-matrix lattice and semigroups for one operator H."""

    def __init__(self, system: FieldSystem, coeff: CoefficientField, T: float = 1.0,
                 cfg: Optional[LeviConfig] = None, lift: Optional[CarnotLift] = None, seed: int = 0):
        if coeff.m != system.m or coeff.n != system.n:
            raise ValueError("coefficient field does not match the system")
        self.system = system
        self.coeff = coeff
        self.T = float(T)
        self.cfg = cfg or LeviConfig()
        self.seed = seed
        self.lift = lift or build_lift(system)
        rng = rng_for(seed, "levi-probe")
        probe = rng.uniform(-3, 3, size=(2000, system.n))
        ev = np.linalg.eigvalsh(coeff(rng.uniform(0, T, 2000), probe))
        self.lam_max = float(ev.max())
        radius = self.cfg.width * math.sqrt(self.lam_max * self.T) + self.cfg.margin
        oracle = MetricOracle(system, segments=16, restarts=1, seed=seed)
        cloud = oracle.reach(np.zeros(system.n), 1.0, 4096, seed=seed)
        half = np.abs(cloud).max(axis=0) * 1.1 * radius ** np.asarray(system.sigma, float)
        self.grid = DownstairsGrid(system, half, self.cfg.active_nodes, self.cfg.passive_nodes)
        self.mesh = self.grid.mesh
        self.pairs = [(i, j) for i in range(system.m) for j in range(i, system.m)]
        self.mult = {p: (1.0 if p[0] == p[1] else 2.0) for p in self.pairs}
        self._corners: Dict[Tuple, _Corner] = {}
        self._varying = coeff.varying_entries()
        self._coeff_cache: Dict[float, Dict[Tuple[int, int], np.ndarray]] = {}
        self._weight_cache: Dict[float, Dict[Tuple, np.ndarray]] = {}
        self.frozen = FrozenKernelCache(self.lift, self.cfg.kernel, Lambda=coeff.Lambda)

    # -- frozen matrices ----------------------------------------------------------------

    def _corner(self, index: Tuple) -> _Corner:
        c = self._corners.get(index)
        if c is None:
            A = np.zeros((self.system.m, self.system.m))
            for (i, j), e in self.coeff.entries.items():
                if (i, j) in self._varying:
                    v = index[self._varying.index((i, j))] * self.cfg.quantum
                else:
                    v = float(e(0.0, np.zeros(self.system.n)))
                A[i, j] = A[j, i] = v
            EllipticMatrix.from_array(A)  # raises NotElliptic
            c = _Corner(index, A, Semigroup(self.grid, A))
            self._corners[index] = c
        return c

    def coefficient_grids(self, t: float) -> Dict[Tuple[int, int], np.ndarray]:
        key = float(t)
        if key not in self._coeff_cache:
            self._coeff_cache[key] = {p: self.coeff.entry(p[0], p[1], t, self.mesh) for p in self.pairs}
        return self._coeff_cache[key]

    def corner_weights(self, t: float, x: Optional[np.ndarray] = None) -> Dict[Tuple, np.ndarray]:
        """Multilinear lattice weights of A(t, x) (grid when x is None)."""
        if x is None and float(t) in self._weight_cache:
            return self._weight_cache[float(t)]
        pts = self.mesh if x is None else np.asarray(x, dtype=float)
        shape = pts.shape[:-1]
        if not self._varying:
            out = {(): np.ones(shape)}
        else:
            q = self.cfg.quantum
            base, frac = [], []
            for (i, j) in self._varying:
                v = self.coeff.entry(i, j, t, pts) / q
                b = np.floor(v)
                base.append(b.astype(np.int64))
                frac.append(v - b)
            out: Dict[Tuple, np.ndarray] = {}
            k = len(self._varying)
            for corner in range(2 ** k):
                bits = [(corner >> b) & 1 for b in range(k)]
                wgt = np.ones(shape)
                for b in range(k):
                    wgt = wgt * (frac[b] if bits[b] else 1 - frac[b])
                idx = np.stack([base[b] + bits[b] for b in range(k)], axis=-1).reshape(-1, k)
                flat = wgt.reshape(-1)
                for key in set(map(tuple, idx[flat > 0].tolist())):
                    sel = np.all(idx == np.array(key), axis=1)
                    arr = out.setdefault(key, np.zeros(flat.shape))
                    arr[sel] += flat[sel]
            out = {k_: v.reshape(shape) for k_, v in out.items()}
        if x is None:
            self._weight_cache[float(t)] = out
        return out

    # -- Volterra machinery ---------------------------------------------------------------------

    def _node_data(self, nodes, values):
        """Eigen-coefficients of w_c p_b and a_ij w_c p_b for every corner and node."""
        data = {}
        for b, tb in enumerate(nodes):
            p = values[b]
            if p is None:
                continue
            coeffs = self.coefficient_grids(tb)
            for key, w in self.corner_weights(tb).items():
                corner = self._corner(key)
                wp = w * p
                entry = data.setdefault(key, {"E0": [None] * len(nodes),
                                              "Eij": {pr: [None] * len(nodes) for pr in self.pairs}})
                entry["E0"][b] = corner.sg.to_eig(self.grid.to_spectral(wp))
                for pr in self.pairs:
                    entry["Eij"][pr][b] = corner.sg.to_eig(self.grid.to_spectral(coeffs[pr] * wp))
        return data

    def _accumulate(self, key, E: List, nodes, t: float):
        """Eigen-coefficients of int_{t0}^{t} e^{(t - tau) L_c} g(tau) dtau, g linear between nodes."""
        sg = self._corner(key).sg
        acc = None
        zero = None
        for b in range(len(nodes) - 1):
            ta, tb = nodes[b], nodes[b + 1]
            if ta >= t:
                break
            e0 = E[b]
            e1 = E[b + 1]
            if e0 is None and e1 is None:
                continue
            if zero is None:
                zero = np.zeros_like(e0 if e0 is not None else e1)
            e0 = zero if e0 is None else e0
            e1 = zero if e1 is None else e1
            if tb > t:  # partial interval: interpolate the end value
                th = (t - ta) / (tb - ta)
                e1 = (1 - th) * e0 + th * e1
                tb = t
            F0, F1 = phi_weights(sg.w, t - tb, tb - ta)
            term = F0 * e0 + F1 * e1
            acc = term if acc is None else acc + term
        return acc

    def apply_K(self, nodes, values, targets=None, potential_only: bool = False):
        """(K p)(t) and the potential (V p)(t) at the target times (default: the nodes).

        (K p)(t, x) = int int Phi_0(t,x;tau,zeta) p(tau,zeta),
        (V p)(t, x) = int int Z(t,x;tau,zeta) p(tau,zeta).
        """
        targets = nodes if targets is None else targets
        data = self._node_data(nodes, values)
        K = [np.zeros(self.grid.shape) for _ in targets]
        V = [np.zeros(self.grid.shape) for _ in targets]
        Q = self.grid.second_derivatives
        for a, t in enumerate(targets):
            if t <= nodes[0]:
                continue
            coeffs = None if potential_only else self.coefficient_grids(t)
            for key, entry in data.items():
                sg = self._corner(key).sg
                acc0 = self._accumulate(key, entry["E0"], nodes, t)
                if acc0 is None:
                    continue
                R0 = sg.from_eig(acc0)
                V[a] += self.grid.to_physical(R0)
                if potential_only:
                    continue
                for pr in self.pairs:
                    accij = self._accumulate(key, entry["Eij"][pr], nodes, t)
                    Rij = sg.from_eig(accij)
                    first = self.grid.to_physical(DownstairsGrid.apply_banded(Q[pr], R0))
                    second = self.grid.to_physical(DownstairsGrid.apply_banded(Q[pr], Rij))
                    K[a] += self.mult[pr] * (coeffs[pr] * first - second)
        return K, V

    def frozen_terms(self, nodes, g: np.ndarray, t0: float, weights: Dict[Tuple, np.ndarray],
                     frozen_coeffs: Dict[Tuple[int, int], np.ndarray]):
        """Z_g(t) = sum_c e^{(t-t0)L_c}[w_c g] and its H-defect at every node.

        ``weights`` and ``frozen_coeffs`` give the lattice weights and matrix
        entries at time t0 (grids or scalars for a pole).
        """
        Q = self.grid.second_derivatives
        Z, P0 = [], []
        spec = {}
        for key, w in weights.items():
            sg = self._corner(key).sg
            spec[key] = (sg, sg.to_eig(self.grid.to_spectral(w * g)),
                         {pr: sg.to_eig(self.grid.to_spectral(frozen_coeffs[pr] * w * g)) for pr in self.pairs})
        for t in nodes:
            coeffs = self.coefficient_grids(t)
            z = np.zeros(self.grid.shape)
            p = np.zeros(self.grid.shape)
            for key, (sg, e0, eij) in spec.items():
                decay = np.exp(-(t - t0) * sg.w)
                R0 = sg.from_eig(decay * e0)
                z += self.grid.to_physical(R0)
                for pr in self.pairs:
                    Rij = sg.from_eig(decay * eij[pr])
                    first = self.grid.to_physical(DownstairsGrid.apply_banded(Q[pr], R0))
                    second = self.grid.to_physical(DownstairsGrid.apply_banded(Q[pr], Rij))
                    p += self.mult[pr] * (coeffs[pr] * first - second)
            Z.append(z)
            P0.append(p)
        return Z, P0

    def frozen_at(self, t: float, g: np.ndarray, t0: float, weights) -> np.ndarray:
        z = np.zeros(self.grid.shape)
        for key, w in weights.items():
            sg = self._corner(key).sg
            z += self.grid.to_physical(sg.evolve(self.grid.to_spectral(w * g), t - t0))
        return z

    def space_time_norm(self, nodes, values) -> float:
        """Trapezoid-in-time of the spatial L1 norms."""
        l1 = np.array([0.0 if v is None else float(np.abs(v).sum() * self.grid.cell) for v in values])
        return float(np.trapezoid(l1, nodes))

    def volterra_series(self, nodes, source, order: Optional[int] = None):
        """Phi = sum_{k <= J} Phi_k with Phi_{k+1} = K Phi_k; returns (Phi, terms norms)."""
        J = self.cfg.order if order is None else order
        terms = [list(source)]
        norms = [self.space_time_norm(nodes, source)]
        for _ in range(J):
            nxt, _ = self.apply_K(nodes, terms[-1])
            nxt[0] = np.zeros(self.grid.shape)
            terms.append(nxt)
            norms.append(self.space_time_norm(nodes, nxt))
        total = [sum(t[b] for t in terms) for b in range(len(nodes))]
        return total, norms

    def check_truncation(self, norms) -> float:
        ind = norms[-1] / norms[0] if norms[0] > 0 else 0.0
        if ind > self.cfg.truncation_tol:
            raise TruncationNotConverged(ind, self.cfg.truncation_tol, norms)
        return ind

    # -- public builders ---------------------------------------------------------------------------

    def frozen_matrix(self, s: float, y) -> EllipticMatrix:
        A = self.coeff(s, np.asarray(y, dtype=float))
        return EllipticMatrix(A, self.coeff.Lambda)

    def kernel(self, s: float, y, order: Optional[int] = None, strict: bool = True) -> "VariableKernel":
        """Gamma(.; s, y) on [s, s + T]. The pole is moved to the nearest grid node."""
        nodes = graded_nodes(s, s + self.T, self.cfg.time_nodes, self.coeff.alpha)
        delta, node = self.grid.delta(y)
        A0 = self.coeff(s, node)
        w_pole = {k: float(v[0]) for k, v in self.corner_weights(s, node[None]).items() if float(v[0]) > 0}
        weights = {k: np.full(self.grid.shape, v) for k, v in w_pole.items()}
        frozen = {pr: A0[pr] for pr in self.pairs}
        Z, P0 = self.frozen_terms(nodes, delta, s, weights, frozen)
        if self.coeff.is_constant:
            phi = [np.zeros(self.grid.shape) for _ in nodes]
            norms = [0.0]
        else:
            phi, norms = self.volterra_series(nodes, P0, order)
            if strict:
                self.check_truncation(norms)
        return VariableKernel(self, s, node, nodes, Z, P0, phi, norms, delta, weights)

    def cauchy(self, g=None, f=None, t0: float = 0.0, T: Optional[float] = None,
               order: Optional[int] = None, strict: bool = True) -> "CauchySolution":
        """u = int Gamma(t,x;t0,y) g(y) dy + int_{t0}^t int Gamma(t,x;s,y) f(s,y) dy ds on the grid."""
        T = self.T if T is None else T
        nodes = graded_nodes(t0, t0 + T, self.cfg.time_nodes, self.coeff.alpha)
        shape = self.grid.shape
        if g is None:
            gg = np.zeros(shape)
        elif callable(g):
            gg = np.asarray(g(self.mesh), dtype=float)
        else:
            gg = np.asarray(g, dtype=float)
        weights = self.corner_weights(t0)
        frozen = self.coefficient_grids(t0)
        Zg, P0 = self.frozen_terms(nodes, gg, t0, weights, frozen)
        fvals = None
        if f is not None:
            fvals = [np.asarray(f(t, self.mesh), dtype=float) * np.ones(shape) for t in nodes]
            Kf, Zf = self.apply_K(nodes, fvals)
            source = [p + k for p, k in zip(P0, Kf)]
        else:
            Zf = [np.zeros(shape) for _ in nodes]
            source = P0
        if self.coeff.is_constant:
            psi = [np.zeros(shape) for _ in nodes]
            norms = [0.0]
        else:
            psi, norms = self.volterra_series(nodes, source, order)
            if strict:
                self.check_truncation(norms)
        return CauchySolution(self, t0, nodes, gg, fvals, weights, psi, norms)


class VariableKernel:
    """Gamma(t, x; s, y) for a fixed pole, Z from the projected frozen kernel plus the grid potential."""

    def __init__(self, engine: LeviEngine, s, y, nodes, Z, P0, phi, norms, delta, weights):
        self.engine = engine
        self.s = float(s)
        self.y = np.asarray(y, dtype=float)
        self.nodes = nodes
        self.Z_grid = Z
        self.phi0 = P0
        self.phi = phi
        self.norms = norms
        self._delta = delta
        self._weights = weights
        self.A0 = engine.frozen_matrix(s, y)
        self._zk = None
        self._pot: Dict[float, np.ndarray] = {}

    @property
    def contraction(self) -> List[float]:
        """Ratios ||Phi_{k+1}|| / ||Phi_k||."""
        n = self.norms
        return [n[k + 1] / n[k] for k in range(len(n) - 1) if n[k] > 0]

    @property
    def truncation_indicator(self) -> float:
        return self.norms[-1] / self.norms[0] if self.norms and self.norms[0] > 0 else 0.0

    @property
    def frozen(self):
        if self._zk is None:
            self._zk = self.engine.frozen.get(self.A0)
        return self._zk

    def potential(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._pot:
            if self.engine.coeff.is_constant or t <= self.s:
                self._pot[key] = np.zeros(self.engine.grid.shape)
            else:
                _, V = self.engine.apply_K(self.nodes, self.phi, targets=[t], potential_only=True)
                self._pot[key] = V[0]
        return self._pot[key]

    def grid_values(self, t: float) -> np.ndarray:
        """Fully discrete Gamma(t, .; s, y) on the grid."""
        z = self.engine.frozen_at(t, self._delta, self.s, self._weights)
        return z + self.potential(t)

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if t <= self.s:
            return np.zeros(len(x))
        z = self.frozen(t, x, self.s, self.y[None])
        return z + self.engine.grid.interpolate(self.potential(t), x)


class CauchySolution:
    """Grid solution of the Cauchy problem with data (f, g) from time t0."""

    def __init__(self, engine, t0, nodes, g, fvals, weights, psi, norms):
        self.engine = engine
        self.t0 = float(t0)
        self.nodes = nodes
        self.g = g
        self.fvals = fvals
        self.weights = weights
        self.psi = psi
        self.norms = norms

    def grid_values(self, t: float) -> np.ndarray:
        e = self.engine
        u = e.frozen_at(t, self.g, self.t0, self.weights)
        if self.fvals is not None:
            _, V = e.apply_K(self.nodes, self.fvals, targets=[t], potential_only=True)
            u = u + V[0]
        if not e.coeff.is_constant:
            _, V = e.apply_K(self.nodes, self.psi, targets=[t], potential_only=True)
            u = u + V[0]
        return u

    def __call__(self, t: float, x) -> np.ndarray:
        return self.engine.grid.interpolate(self.grid_values(t), np.atleast_2d(x))


def growth_delta(Lambda: float, kappa: float) -> float:
    """Default admissible budget delta = 1/(8 Lambda kappa) for T mu < delta."""
    return 1.0 / (8.0 * Lambda * kappa)


def solve_cauchy(engine: LeviEngine, f=None, g=None, T: Optional[float] = None, mu: float = 0.0,
                 kappa: float = 4.0, t0: float = 0.0, **kw) -> CauchySolution:
    """Cauchy problem with data bounded by M exp(mu d(x,0)^2); requires T mu < delta."""
    T = engine.T if T is None else T
    delta = growth_delta(engine.coeff.Lambda, kappa)
    if T * mu >= delta:
        raise GrowthBudgetExceeded(f"T*mu = {T * mu:.3g} is not below delta = {delta:.3g}")
    sol = engine.cauchy(g=g, f=f, t0=t0, T=T, **kw)
    sol.delta = delta
    return sol


def parametrix_Z(engine: LeviEngine, t: float, x, s: float, y) -> np.ndarray:
    """Frozen-at-pole parametrix Gamma_{A(s,y)}(t, x; s, y)."""
    pk = engine.frozen.get(engine.frozen_matrix(s, y))
    return pk(t, np.atleast_2d(x), s, np.atleast_2d(y))


# -- verification -------------------------------------------------------------------------

def variable_residual(vk: VariableKernel, t: float, x, hfrac: float = 1 / 50) -> np.ndarray:
    """|H Gamma(.; s, y)| / (Gamma / (t - s)) at points x by differences along flows.

    Space derivatives are centred differences along exact flows of the
    fields; d/dt is a centred difference of the evaluator in t.
    """
    e = vk.engine
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tau = t - vk.s
    h = math.sqrt(tau) * hfrac
    flows = FieldFlows(e.system)
    out = np.zeros(len(x))
    f = lambda pts: vk(t, pts)  # noqa: E731
    g0 = vk(t, x)
    dt = tau * 2 * hfrac
    dtg = (vk(t + dt, x) - vk(t - dt, x)) / (2 * dt)
    for k in range(len(x)):
        A = e.coeff(t, x[k])
        lap = apply_operator_fd(f, flows, A, x[k:k + 1], h)[0]
        out[k] = abs(lap - dtg[k]) / (abs(g0[k]) / tau)
    return out


def verify_variable_bounds(kernels: Sequence[VariableKernel], E: GaussianE, probes, kmax: int = 12) -> Dict[str, BoundFit]:
    """Fit c_T for the two-sided bound (i) and the derivative envelopes (ii)-(iii).

    ``probes`` is a sequence of (kernel index, t, x) with t > s of that kernel.
    """
    rows = []
    for ki, t, x in probes:
        vk = kernels[ki]
        rows.append((vk, float(t), np.asarray(x, dtype=float)))
    if not rows:
        return {k: BoundFit(k, {"c": float("nan")}, 0) for k in ("two-sided", "first-derivative", "second-derivative")}
    tau = np.array([t - vk.s for vk, t, _ in rows])
    xs = np.array([x for _, _, x in rows])
    ys = np.array([vk.y for vk, _, _ in rows])
    d = E.distances(xs, ys)
    vol = E.volume(xs, np.sqrt(tau))
    gam = np.array([vk(t, x[None])[0] for vk, t, x in rows])
    flows = FieldFlows(kernels[0].engine.system)
    m = kernels[0].engine.system.m
    first = np.zeros(len(rows))
    second = np.zeros(len(rows))
    for r, (vk, t, x) in enumerate(rows):
        h = math.sqrt(t - vk.s) / 50
        f = lambda pts, vk=vk, t=t: vk(t, pts)  # noqa: E731
        for i in range(m):
            first[r] = max(first[r], abs(field_derivative_fd(f, flows, i, x[None], h)[0]))
            for j in range(m):
                P = np.zeros((m, m))
                P[i, j] = P[j, i] = 1.0 if i == j else 0.5
                val = apply_operator_fd(f, flows, P, x[None], h)[0]
                second[r] = max(second[r], abs(val))
        dt = (t - vk.s) / 25
        second[r] = max(second[r], abs(vk(t + dt, x[None])[0] - vk(t - dt, x[None])[0]) / (2 * dt))

    def fit(name, ok_fn, ratio_fn):
        for k in range(kmax + 1):
            c = 2.0 ** k
            if ok_fn(c):
                marg = ratio_fn(c)
                i = int(np.argmin(marg))
                return BoundFit(name, {"c": c}, len(rows), margin=float(marg[i]),
                                tightest={"tau": float(tau[i]), "x": xs[i].tolist(), "y": ys[i].tolist()})
        raise FitFailure(f"{name}: no c <= 2^{kmax}", probe=None)

    lo = lambda c: np.exp(-c * d ** 2 / tau) / (c * vol)  # noqa: E731
    hi = lambda c: c * np.exp(-d ** 2 / (c * tau)) / vol  # noqa: E731
    out = {
        "two-sided": fit("two-sided", lambda c: np.all((gam >= lo(c)) & (gam <= hi(c))),
                         lambda c: np.minimum(gam / lo(c), hi(c) / np.maximum(gam, 1e-300))),
        "first-derivative": fit("first-derivative", lambda c: np.all(first <= hi(c) / np.sqrt(tau)),
                                lambda c: hi(c) / np.sqrt(tau) / np.maximum(first, 1e-300)),
        "second-derivative": fit("second-derivative", lambda c: np.all(second <= hi(c) / tau),
                                 lambda c: hi(c) / tau / np.maximum(second, 1e-300)),
    }
    return out
