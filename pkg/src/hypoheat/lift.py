"""Lifting a homogeneous Hörmander system to a homogeneous Carnot group.

The group is built from the stratified algebra in three steps:

1. the Baker-Campbell-Hausdorff product ``a ⋄ b`` in exponential coordinates
   of the adapted basis (Dynkin's formula, truncated at the step);
2. the map ``Psi(a) = exp(sum a_k E_k)(0)`` onto R^n, which satisfies
   ``Psi(a ⋄ b) = exp(sum b_k E_k)(Psi(a))`` and hence pushes the
   left-invariant fields of ``⋄`` onto the E_k;
3. a graded-triangular change of coordinates ``T(a) = (Psi(a), xi)`` where
   ``xi`` are complementary exponential coordinates, so that the first n
   coordinates of the lifted generators are exactly the original fields.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exact import SparseEchelon, inverse
from .fields import (
    Dilation,
    FieldSystem,
    StratifiedAlgebra,
    VectorField,
    generate_algebra,
)
from .polynomial import Polynomial


class LiftMismatch(RuntimeError):
    """The lifted generators do not project onto the original fields."""


class NonFinite(FloatingPointError):
    pass


# -- BCH -------------------------------------------------------------------

def _is_block(word: Tuple[int, ...]) -> bool:
    """True for words of the form X^r Y^s (letters 0 then 1)."""
    return all(not (a == 1 and b == 0) for a, b in zip(word, word[1:]))


@lru_cache(maxsize=None)
def _split_sum(word: Tuple[int, ...]) -> Dict[int, Fraction]:
    """Sum over splittings of ``word`` into X^r Y^s blocks, keyed by block count.

    Each value is sum over splittings of prod 1/(r_i! s_i!).
    """
    if not word:
        return {0: Fraction(1)}
    out: Dict[int, Fraction] = {}
    for cut in range(1, len(word) + 1):
        head = word[:cut]
        if not _is_block(head):
            break
        r = head.count(0)
        s = len(head) - r
        w = Fraction(1, math.factorial(r) * math.factorial(s))
        for k, v in _split_sum(word[cut:]).items():
            out[k + 1] = out.get(k + 1, Fraction(0)) + w * v
    return out


def dynkin_coefficients(depth: int) -> Dict[Tuple[int, ...], Fraction]:
    """Coefficients c_w with log(e^X e^Y) = sum_w c_w [w] up to bracket length ``depth``.

    Words use letters 0 (X) and 1 (Y); ``[w]`` is the right-nested bracket
    [w_1, [w_2, ..., [w_{L-1}, w_L]]].
    """
    coeffs = {}
    for L in range(1, depth + 1):
        for word in itertools.product((0, 1), repeat=L):
            if L >= 2 and word[-1] == word[-2]:
                continue
            total = sum(
                Fraction((-1) ** (k - 1), k) * v for k, v in _split_sum(word).items()
            )
            if total:
                coeffs[word] = total / L
    return coeffs


Element = List[Polynomial]  # algebra element: coordinates in the adapted basis


def _algebra_bracket(alg: StratifiedAlgebra, u: Element, v: Element) -> Element:
    N = alg.N
    nv = u[0].nvars
    out = [Polynomial.zero(nv) for _ in range(N)]
    for i in range(N):
        if not u[i]:
            continue
        for j in range(N):
            if i == j or not v[j]:
                continue
            c = alg.bracket_coords(i, j)
            if not any(c):
                continue
            prod = u[i] * v[j]
            for k, ck in enumerate(c):
                if ck:
                    out[k] = out[k] + prod * ck
    return out


def bch_product(alg: StratifiedAlgebra) -> List[Polynomial]:
    """Group law a ⋄ b on R^N in exponential coordinates of the adapted basis.

    Returns N polynomials in 2N variables (a first, then b).
    """
    N = alg.N
    nv = 2 * N
    X = [Polynomial.variable(nv, k) for k in range(N)]
    Y = [Polynomial.variable(nv, N + k) for k in range(N)]
    letters = (X, Y)
    cache: Dict[Tuple[int, ...], Element] = {}

    def nested(word):
        if word in cache:
            return cache[word]
        if len(word) == 1:
            res = letters[word[0]]
        else:
            res = _algebra_bracket(alg, letters[word[0]], nested(word[1:]))
        cache[word] = res
        return res

    out = [Polynomial.zero(nv) for _ in range(N)]
    for word, c in dynkin_coefficients(alg.step).items():
        el = nested(word)
        for k in range(N):
            if el[k]:
                out[k] = out[k] + el[k] * c
    return out


# -- polynomial helpers ----------------------------------------------------

def _select(p: Polynomial, indices: Sequence[int]) -> Polynomial:
    """Restrict to the variables ``indices`` (others must not occur)."""
    idx = list(indices)
    terms = {}
    for m, c in p.terms.items():
        if any(e for i, e in enumerate(m) if i not in idx):
            raise ValueError("polynomial depends on dropped variables")
        terms[tuple(m[i] for i in idx)] = c
    return Polynomial(len(idx), terms)


def lie_series_flow(field_components: Sequence[Polynomial], coords: Sequence[int],
                    max_order: int) -> List[Polynomial]:
    """Time-one flow sum_l V^l(z_j)/l! of a nilpotent polynomial field.

    ``field_components[j]`` multiplies d/dz_{coords[j]}; returns the
    flowed coordinate functions for the variables in ``coords``.
    """
    nv = field_components[0].nvars
    out = []
    for j in coords:
        term = Polynomial.variable(nv, j)
        total = term
        for l in range(1, max_order + 1):
            nxt = Polynomial.zero(nv)
            for comp, c in zip(field_components, coords):
                if comp:
                    d = term.diff(c)
                    if d:
                        nxt = nxt + comp * d
            term = nxt * Fraction(1, l)
            if not term:
                break
            total = total + term
        out.append(total)
    return out


# -- the lift --------------------------------------------------------------

@dataclass
class CarnotLift:
    """Homogeneous Carnot group (R^N, ∗, D_lam) with lifted generators.

    Coordinates are z = (x, xi) with x in R^n matching the original space.
    """

    system: FieldSystem
    algebra: StratifiedAlgebra
    group_law: List[Polynomial]      # N polys in 2N vars
    inverse_map: List[Polynomial]    # N polys in N vars
    exponents: Tuple[int, ...]
    lifted_fields: Tuple[VectorField, ...]
    chart: List[Polynomial] = field(repr=False)      # T: exponential coords -> z
    chart_inv: List[Polynomial] = field(repr=False)  # T^{-1}
    complementary: Tuple[int, ...] = ()              # basis indices used as xi

    @property
    def N(self) -> int:
        return len(self.exponents)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def p(self) -> int:
        return self.N - self.n

    @property
    def Q(self) -> int:
        return sum(self.exponents)

    @property
    def q(self) -> int:
        return self.system.q

    @property
    def s(self) -> Tuple[int, ...]:
        return self.exponents[self.n:]

    @property
    def step(self) -> int:
        return self.algebra.step

    @property
    def lifted_system(self) -> FieldSystem:
        return FieldSystem(self.lifted_fields, Dilation(self.exponents, ordered=False))

    # numeric evaluation ------------------------------------------------
    def multiply(self, z, w) -> np.ndarray:
        """Vectorised z ∗ w for arrays of shape (..., N)."""
        z, w = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(w, dtype=float))
        zw = np.concatenate([z, w], axis=-1)
        return np.stack([g.evaluate(zw) for g in self.group_law], axis=-1)

    def inv(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.stack([g.evaluate(z) for g in self.inverse_map], axis=-1)

    def dilate(self, lam: float, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * lam ** np.asarray(self.exponents, dtype=float)

    def project(self, z) -> np.ndarray:
        return np.asarray(z)[..., : self.n]

    # exact evaluation --------------------------------------------------
    def multiply_exact(self, z, w) -> List[Fraction]:
        pt = [Fraction(v) for v in list(z) + list(w)]
        return [g(*pt) for g in self.group_law]

    def inv_exact(self, z) -> List[Fraction]:
        pt = [Fraction(v) for v in z]
        return [g(*pt) for g in self.inverse_map]

    # checks ------------------------------------------------------------
    def check_identity_inverse(self, samples) -> int:
        """Number of failures of z∗0 = 0∗z = z and z∗z⁻¹ = z⁻¹∗z = 0."""
        bad = 0
        zero = [Fraction(0)] * self.N
        for z in samples:
            z = [Fraction(v) for v in z]
            zi = self.inv_exact(z)
            if self.multiply_exact(z, zero) != z or self.multiply_exact(zero, z) != z:
                bad += 1
            elif any(self.multiply_exact(z, zi)) or any(self.multiply_exact(zi, z)):
                bad += 1
        return bad

    def check_associativity(self, triples) -> int:
        bad = 0
        for a, b, c in triples:
            left = self.multiply_exact(self.multiply_exact(a, b), c)
            right = self.multiply_exact(a, self.multiply_exact(b, c))
            bad += left != right
        return bad

    def check_dilation_automorphism(self) -> bool:
        """D_lam(a∗b) = D_lam a ∗ D_lam b identically in lam (weighted homogeneity)."""
        w = list(self.exponents) * 2
        return all(g.is_homogeneous(w, e) for g, e in zip(self.group_law, self.exponents))

    def check_projection(self) -> bool:
        """First n components of each lifted field equal the original field, exactly."""
        for hat, X in zip(self.lifted_fields, self.system.fields):
            for j in range(self.n):
                if hat.components[j] != X.components[j].extend(self.N):
                    return False
        return True

    def check_field_homogeneity(self) -> bool:
        return all(f.is_homogeneous(self.exponents, 1) for f in self.lifted_fields)

    def check_left_invariance(self, pairs) -> int:
        """Failures of X̂(g∗z) = d(L_g)_z X̂(z) over exact sample pairs (g, z)."""
        N = self.N
        jac = [[gl.diff(N + k) for k in range(N)] for gl in self.group_law]
        bad = 0
        for g, z in pairs:
            g = [Fraction(v) for v in g]
            z = [Fraction(v) for v in z]
            gz = self.multiply_exact(g, z)
            pt = g + z
            J = [[jac[j][k](*pt) for k in range(N)] for j in range(N)]
            for f in self.lifted_fields:
                lhs = f.at(gz)
                vz = f.at(z)
                rhs = [sum(J[j][k] * vz[k] for k in range(N)) for j in range(N)]
                if lhs != rhs:
                    bad += 1
        return bad

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "n": self.n,
            "p": self.p,
            "q": self.q,
            "Q": self.Q,
            "step": self.step,
            "exponents": list(self.exponents),
            "complementary_basis_indices": list(self.complementary),
            "group_law": [g.to_json() for g in self.group_law],
            "inverse": [g.to_json() for g in self.inverse_map],
            "lifted_fields": [f.to_json() for f in self.lifted_fields],
        }


def exponential_map(alg: StratifiedAlgebra) -> List[Polynomial]:
    """Psi(a) = exp(sum a_k E_k)(0) as n polynomials in the N coordinates a."""
    n, N = alg.n, alg.N
    nv = n + N
    comps = []
    for j in range(n):
        total = Polynomial.zero(nv)
        for k, E in enumerate(alg.basis):
            c = E.components[j]
            if c:
                total = total + c.extend(nv) * Polynomial.variable(nv, n + k)
        comps.append(total)
    flows = lie_series_flow(comps, list(range(n)), max(alg.system.sigma))
    at_zero = [f.partial_eval({i: 0 for i in range(n)}) for f in flows]
    return [_select(f, range(n, nv)) for f in at_zero]


def build_lift(system: FieldSystem, algebra: Optional[StratifiedAlgebra] = None) -> CarnotLift:
    """Construct the Carnot group and the lifted fields X̂_i = X_i + R_i."""
    alg = algebra or generate_algebra(system)
    n, N, m = system.n, alg.N, system.m
    sigma = system.sigma
    layer = alg.layer_of
    psi = exponential_map(alg)
    bch = bch_product(alg)

    # choose complementary exponential coordinates layer by layer so that
    # T(a) = (Psi(a), a_comp) has an invertible graded linear part
    lin_rows: Dict[int, List[Tuple[str, int, List[Fraction]]]] = {}
    for s in range(1, alg.step + 1):
        members = [k for k in range(N) if layer[k] == s]
        rows = []
        ech = SparseEchelon()
        for j in range(n):
            if sigma[j] != s:
                continue
            row = [psi[j].terms.get(tuple(int(i == k) for i in range(N)), Fraction(0))
                   for k in members]
            if not ech.add({i: v for i, v in enumerate(row) if v}):
                raise LiftMismatch(f"linear part of Psi degenerate in layer {s}")
            rows.append(("x", j, row))
        for pos, k in enumerate(members):
            if len(rows) == len(members):
                break
            unit = {pos: Fraction(1)}
            if ech.add(unit):
                rows.append(("xi", k, [Fraction(int(i == pos)) for i in range(len(members))]))
        if len(rows) != len(members):
            raise LiftMismatch(f"could not complete layer {s}")
        lin_rows[s] = rows

    complementary = tuple(
        k for s in sorted(lin_rows) for kind, k, _ in lin_rows[s] if kind == "xi"
    )
    exponents = tuple(sigma) + tuple(layer[k] for k in complementary)
    chart = [psi[j] for j in range(n)] + [Polynomial.variable(N, k) for k in complementary]
    z_index = {("x", j): j for j in range(n)}
    z_index.update({("xi", k): n + i for i, k in enumerate(complementary)})

    # invert T layer by layer: a_s = L_s^{-1} (z_s - P_s(a_{<s}))
    a_of_z: List[Optional[Polynomial]] = [None] * N
    for s in sorted(lin_rows):
        members = [k for k in range(N) if layer[k] == s]
        rows = lin_rows[s]
        Linv = inverse([r[2] for r in rows])
        subs = [a_of_z[k] if a_of_z[k] is not None else Polynomial.zero(N) for k in range(N)]
        rhs = []
        for kind, idx, row in rows:
            zi = Polynomial.variable(N, z_index[(kind, idx)])
            if kind == "x":
                nonlinear = psi[idx] - sum(
                    (Polynomial.variable(N, k) * c for k, c in zip(members, row) if c),
                    Polynomial.zero(N),
                )
                rhs.append(zi - nonlinear.substitute(subs))
            else:
                rhs.append(zi)
        for r, k in enumerate(members):
            a_of_z[k] = sum((rhs[c] * Linv[r][c] for c in range(len(rows)) if Linv[r][c]),
                            Polynomial.zero(N))
    chart_inv = [p for p in a_of_z]

    # group law z ∗ w = T(T^{-1} z ⋄ T^{-1} w)
    left = [p.extend(2 * N, 0) for p in chart_inv]
    right = [p.extend(2 * N, N) for p in chart_inv]
    prod_exp = [b.substitute(left + right) for b in bch]
    group_law = [t.substitute(prod_exp) for t in chart]
    inverse_map = [t.substitute([-p for p in chart_inv]) for t in chart]

    # left-invariant fields J_i(a) = d/db_i (a ⋄ b)|_{b=0}, pushed forward by T
    zero_b = {N + k: 0 for k in range(N)}
    lifted = []
    for i in range(m):
        J = [_select(b.diff(N + i).partial_eval(zero_b), range(N)) for b in bch]
        comps = []
        for t in chart:
            dt = sum((t.diff(k) * J[k] for k in range(N) if J[k]), Polynomial.zero(N))
            comps.append(dt.substitute(chart_inv))
        lifted.append(VectorField(tuple(comps)))

    lift = CarnotLift(
        system=system,
        algebra=alg,
        group_law=group_law,
        inverse_map=inverse_map,
        exponents=exponents,
        lifted_fields=tuple(lifted),
        chart=chart,
        chart_inv=chart_inv,
        complementary=complementary,
    )
    if not lift.check_projection():
        raise LiftMismatch("first n components of the lifted fields differ from X_i")
    return lift


# -- flows -----------------------------------------------------------------

def flow_polynomials(field: VectorField, weights: Sequence[int]) -> List[Polynomial]:
    """Exact time-t flow of a homogeneous nilpotent field.

    Returns polynomials in (z, t) (dim + 1 variables) giving exp(tX)(z); the
    Lie series terminates at order max(weights) because each application of a
    degree-1 field lowers the weighted degree by one.
    """
    d = field.dim
    nv = d + 1
    t = Polynomial.variable(nv, d)
    comps = [c.extend(nv) * t for c in field.components]
    return lie_series_flow(comps, list(range(d)), max(weights))


def _degree_bound(field: VectorField) -> int:
    return max(1, max((c.degree() for c in field.components), default=1))


def exp_flow(field: VectorField, z, t: float, steps: Optional[int] = None) -> np.ndarray:
    """Integrate dz/ds = field(z) from s=0 to s=t with classical RK4.

    ``z`` may be a batch of shape (k, dim). The default step count keeps
    |t| * degree / steps <= 0.1.
    """
    z = np.array(z, dtype=float)
    if steps is None:
        steps = max(1, int(math.ceil(abs(t) * _degree_bound(field) / 0.1)))
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = t / steps
    f = field.evaluate
    for _ in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * h * k1)
        k3 = f(z + 0.5 * h * k2)
        k4 = f(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise NonFinite("flow left the representable range")
    return z


def lift_function(u: Callable, n: int) -> Callable:
    """v(t, z) = u(t, pi(z)) for a function u(t, x) of x in R^n."""

    def v(t, z):
        return u(t, np.asarray(z)[..., :n])

    return v


def flow_commutation_error(lift: CarnotLift, samples: int = 50, seed: int = 0) -> float:
    """sup |pi(exp(t X̂_i) z) - exp(t X_i)(pi z)| over random z and t in [-1, 1].

    Both flows are integrated with :func:`exp_flow`; they agree exactly
    because the first n components of X̂_i are those of X_i.
    """
    from .bounds import rng_for

    rng = rng_for(seed, "flow-commutation")
    z = rng.uniform(-1, 1, size=(samples, lift.N))
    ts = rng.uniform(-1, 1, size=samples)
    worst = 0.0
    for i, (hat, X) in enumerate(zip(lift.lifted_fields, lift.system.fields)):
        for k in range(samples):
            up = exp_flow(hat, z[k], ts[k])[: lift.n]
            down = exp_flow(X, z[k, : lift.n], ts[k])
            worst = max(worst, float(np.max(np.abs(up - down))))
    return worst
