"""Sparse multivariate polynomials with exact rational coefficients."""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

Monomial = Tuple[int, ...]


def _frac(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, float):
        return Fraction(c).limit_denominator(10**12)
    return Fraction(c)


class Polynomial:
    """Immutable polynomial in ``nvars`` variables.

    Terms are stored as a mapping from exponent tuples to nonzero
    ``Fraction`` coefficients, kept in sorted order so that two equal
    polynomials compare equal structurally.
    """

    __slots__ = ("nvars", "terms", "_hash", "_compiled")

    def __init__(self, nvars: int, terms: Mapping[Monomial, object] | None = None):
        self.nvars = int(nvars)
        clean: Dict[Monomial, Fraction] = {}
        for mono, c in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != self.nvars:
                raise ValueError(f"monomial {mono} does not have {self.nvars} exponents")
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            c = _frac(c)
            if c:
                clean[mono] = clean.get(mono, Fraction(0)) + c
        self.terms = {m: clean[m] for m in sorted(clean) if clean[m] != 0}
        self._hash = None
        self._compiled = None

    # constructors -----------------------------------------------------
    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars)

    @classmethod
    def constant(cls, nvars: int, c) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Polynomial":
        mono = [0] * nvars
        mono[i] = 1
        return cls(nvars, {tuple(mono): 1})

    @classmethod
    def monomial(cls, exps: Sequence[int], c=1) -> "Polynomial":
        return cls(len(exps), {tuple(exps): c})

    # basic protocol ---------------------------------------------------
    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, Fraction)):
            other = Polynomial.constant(self.nvars, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self.terms == other.terms

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.nvars, tuple(self.terms.items())))
        return self._hash

    def __repr__(self) -> str:
        return f"Polynomial({self.nvars}, {self})"

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for mono, c in self.terms.items():
            factors = [f"z{i}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(mono) if e]
            body = "*".join(factors)
            if not body:
                parts.append(str(c))
            elif c == 1:
                parts.append(body)
            elif c == -1:
                parts.append("-" + body)
            else:
                parts.append(f"{c}*{body}")
        return " + ".join(parts)

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("polynomials live in different variable counts")
            return other
        return Polynomial.constant(self.nvars, other)

    # arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Polynomial":
        other = self._coerce(other)
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms.get(m, Fraction(0)) + c
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            c = _frac(other)
            return Polynomial(self.nvars, {m: v * c for m, v in self.terms.items()})
        other = self._coerce(other)
        terms: Dict[Monomial, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                terms[m] = terms.get(m, Fraction(0)) + c1 * c2
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Polynomial":
        result = Polynomial.constant(self.nvars, 1)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    # calculus and structure ------------------------------------------
    def diff(self, i: int) -> "Polynomial":
        terms = {}
        for m, c in self.terms.items():
            if m[i]:
                mm = list(m)
                mm[i] -= 1
                terms[tuple(mm)] = c * m[i]
        return Polynomial(self.nvars, terms)

    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=-1)

    def weighted_degrees(self, weights: Sequence[int]) -> set:
        return {sum(w * e for w, e in zip(weights, m)) for m in self.terms}

    def is_homogeneous(self, weights: Sequence[int], degree: int) -> bool:
        """True iff every term has weighted degree ``degree`` (zero counts as homogeneous)."""
        return all(d == degree for d in self.weighted_degrees(weights))

    def off_degree_terms(self, weights: Sequence[int], degree: int) -> list:
        return [m for m in self.terms if sum(w * e for w, e in zip(weights, m)) != degree]

    def variables(self) -> set:
        return {i for m in self.terms for i, e in enumerate(m) if e}

    def extend(self, nvars: int, offset: int = 0) -> "Polynomial":
        """Embed into a larger variable set, shifting variable ``i`` to ``i + offset``."""
        terms = {}
        for m, c in self.terms.items():
            mm = [0] * nvars
            mm[offset:offset + self.nvars] = m
            terms[tuple(mm)] = c
        return Polynomial(nvars, terms)

    def substitute(self, values: Sequence["Polynomial"]) -> "Polynomial":
        """Compose: replace variable ``i`` by the polynomial ``values[i]``."""
        if len(values) != self.nvars:
            raise ValueError("need one substitution per variable")
        target = values[0].nvars if values else 0
        powers: Dict[Tuple[int, int], Polynomial] = {}

        def power(i, e):
            key = (i, e)
            if key not in powers:
                powers[key] = values[i] ** e
            return powers[key]

        result = Polynomial.zero(target)
        for m, c in self.terms.items():
            term = Polynomial.constant(target, c)
            for i, e in enumerate(m):
                if e:
                    term = term * power(i, e)
            result = result + term
        return result

    def partial_eval(self, assignment: Mapping[int, object]) -> "Polynomial":
        """Fix some variables to exact values, keeping the variable count."""
        terms: Dict[Monomial, Fraction] = {}
        for m, c in self.terms.items():
            mm = list(m)
            for i, v in assignment.items():
                if mm[i]:
                    c = c * _frac(v) ** mm[i]
                    mm[i] = 0
            terms[tuple(mm)] = terms.get(tuple(mm), Fraction(0)) + c
        return Polynomial(self.nvars, terms)

    def __call__(self, *point):
        """Exact evaluation when ``point`` holds rationals, float otherwise."""
        if len(point) == 1 and isinstance(point[0], (list, tuple, np.ndarray)):
            point = tuple(point[0])
        if len(point) != self.nvars:
            raise ValueError(f"expected {self.nvars} coordinates")
        if all(isinstance(p, (int, Fraction)) for p in point):
            total = Fraction(0)
            for m, c in self.terms.items():
                v = c
                for p, e in zip(point, m):
                    if e:
                        v *= Fraction(p) ** e
                total += v
            return total
        return float(self.evaluate(np.asarray(point, dtype=float)[None, :])[0])

    # numerics ---------------------------------------------------------
    def _compile(self):
        if self._compiled is None:
            if self.terms:
                exps = np.array(list(self.terms.keys()), dtype=np.int64)
                coefs = np.array([float(c) for c in self.terms.values()])
            else:
                exps = np.zeros((0, self.nvars), dtype=np.int64)
                coefs = np.zeros(0)
            self._compiled = (exps, coefs)
        return self._compiled

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Vectorised evaluation at ``points`` of shape (..., nvars); works for complex input."""
        points = np.asarray(points)
        exps, coefs = self._compile()
        shape = points.shape[:-1]
        if exps.shape[0] == 0:
            return np.zeros(shape, dtype=points.dtype if np.iscomplexobj(points) else float)
        flat = points.reshape(-1, self.nvars)
        out = np.zeros(flat.shape[0], dtype=np.result_type(flat.dtype, float))
        maxdeg = int(exps.max()) if exps.size else 0
        cache = {}
        for k in range(self.nvars):
            col = flat[:, k]
            p = [np.ones_like(col)]
            for _ in range(maxdeg):
                p.append(p[-1] * col)
            cache[k] = p
        for row, c in zip(exps, coefs):
            term = np.full(flat.shape[0], c, dtype=out.dtype)
            for k, e in enumerate(row):
                if e:
                    term = term * cache[k][e]
            out = out + term
        return out.reshape(shape)

    # serialisation ----------------------------------------------------
    def to_json(self) -> list:
        return [
            {"exps": list(m), "num": c.numerator, "den": c.denominator}
            for m, c in self.terms.items()
        ]

    @classmethod
    def from_json(cls, nvars: int, data: Iterable[Mapping]) -> "Polynomial":
        terms: Dict[Monomial, Fraction] = {}
        for item in data:
            mono = tuple(int(e) for e in item["exps"])
            c = Fraction(int(item.get("num", 1)), int(item.get("den", 1)))
            terms[mono] = terms.get(mono, Fraction(0)) + c
        return cls(nvars, terms)


def coefficient_vector(polys: Sequence[Polynomial]) -> Dict[Tuple[int, Monomial], Fraction]:
    """Flatten a list of polynomials (e.g. vector-field components) into a sparse vector."""
    vec = {}
    for j, p in enumerate(polys):
        for m, c in p.terms.items():
            vec[(j, m)] = c
    return vec


class PolyMap:
    """Fast numeric evaluation of several polynomials sharing one variable set.

    All distinct monomials are evaluated once per point and combined with a
    dense coefficient matrix, which is much cheaper than evaluating each
    polynomial separately when the outputs share monomials.
    """

    def __init__(self, polys: Sequence[Polynomial]):
        polys = list(polys)
        if not polys:
            raise ValueError("need at least one polynomial")
        self.nvars = polys[0].nvars
        self.nout = len(polys)
        monos = sorted({m for p in polys for m in p.terms})
        if not monos:
            monos = [(0,) * self.nvars]
        self.exps = np.array(monos, dtype=np.int64).reshape(len(monos), self.nvars)
        index = {m: i for i, m in enumerate(monos)}
        self.coef = np.zeros((len(monos), self.nout))
        for j, p in enumerate(polys):
            for m, c in p.terms.items():
                self.coef[index[m], j] = float(c)
        self.maxdeg = int(self.exps.max()) if self.exps.size else 0
        self._active = [k for k in range(self.nvars) if self.exps[:, k].any()]

    def monomials(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        flat = points.reshape(-1, self.nvars)
        out = np.ones((flat.shape[0], self.exps.shape[0]), dtype=np.result_type(flat.dtype, float))
        for k in self._active:
            col = flat[:, k]
            powers = [None, col]
            for _ in range(2, self.maxdeg + 1):
                powers.append(powers[-1] * col)
            ek = self.exps[:, k]
            for e in range(1, self.maxdeg + 1):
                sel = ek == e
                if sel.any():
                    out[:, sel] *= powers[e][:, None]
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        vals = self.monomials(points) @ self.coef
        return vals.reshape(points.shape[:-1] + (self.nout,))
