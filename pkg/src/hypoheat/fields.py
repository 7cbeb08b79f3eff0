"""Homogeneous polynomial vector fields, Lie brackets and the stratified algebra they generate."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exact import SparseEchelon, rank
from .polynomial import Polynomial


class FieldSystemError(ValueError):
    """Base class for invalid vector-field input."""


class NonHomogeneous(FieldSystemError):
    pass


class RankDeficientAtZero(FieldSystemError):
    def __init__(self, rank: int, n: int):
        super().__init__(f"RankDeficientAtZero rank={rank} (need {n})")
        self.rank = rank
        self.n = n


class BadDilation(FieldSystemError):
    pass


class DimensionMismatch(FieldSystemError):
    pass


class DependentFields(FieldSystemError):
    pass


class InternalInconsistency(RuntimeError):
    pass


@dataclass(frozen=True)
class Dilation:
    """Exponents of x -> (lam^e_1 x_1, ..., lam^e_n x_n).

    Downstairs dilations must be sorted with first exponent 1; the lifted
    group uses ``ordered=False`` because its exponents are (sigma, s).
    """

    exponents: Tuple[int, ...]
    ordered: bool = True

    def __post_init__(self):
        exps = tuple(int(e) for e in self.exponents)
        object.__setattr__(self, "exponents", exps)
        if not exps:
            raise BadDilation("empty dilation")
        if any(e < 1 for e in exps):
            raise BadDilation(f"exponents must be positive: {list(exps)}")
        if not self.ordered:
            return
        if exps[0] != 1:
            raise BadDilation(f"first exponent must be 1, got {exps[0]}")
        if any(b < a for a, b in zip(exps, exps[1:])):
            raise BadDilation(f"exponents must be nondecreasing: {list(exps)}")

    @property
    def n(self) -> int:
        return len(self.exponents)

    @property
    def q(self) -> int:
        return sum(self.exponents)

    def apply(self, lam: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x * lam ** np.asarray(self.exponents, dtype=float)


@dataclass(frozen=True)
class VectorField:
    """First-order operator sum_j components[j] * d/dz_j with polynomial coefficients."""

    components: Tuple[Polynomial, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if any(c.nvars != len(comps) for c in comps):
            raise DimensionMismatch("each component must be a polynomial in dim variables")

    @property
    def dim(self) -> int:
        return len(self.components)

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        return cls(tuple(Polynomial.zero(dim) for _ in range(dim)))

    @classmethod
    def coordinate(cls, dim: int, j: int) -> "VectorField":
        comps = [Polynomial.zero(dim) for _ in range(dim)]
        comps[j] = Polynomial.constant(dim, 1)
        return cls(tuple(comps))

    def is_zero(self) -> bool:
        return all(c.is_zero() for c in self.components)

    def apply(self, f: Polynomial) -> Polynomial:
        """Action on a polynomial: sum_j a_j * df/dz_j."""
        out = Polynomial.zero(self.dim)
        for j, a in enumerate(self.components):
            if a:
                out = out + a * f.diff(j)
        return out

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_dims(self, other)
        return VectorField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        _check_dims(self, other)
        return VectorField(tuple(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self) -> "VectorField":
        return VectorField(tuple(-a for a in self.components))

    def scale(self, c) -> "VectorField":
        return VectorField(tuple(a * c for a in self.components))

    def __rmul__(self, c) -> "VectorField":
        return self.scale(c)

    def at(self, point) -> list:
        return [c(*point) for c in self.components]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Numeric evaluation at points of shape (..., dim); returns (..., dim)."""
        return np.stack([c.evaluate(points) for c in self.components], axis=-1)

    def homogeneity_defects(self, weights: Sequence[int], degree: int) -> list:
        """(component, monomial) pairs that break homogeneity of the given degree."""
        bad = []
        for j, comp in enumerate(self.components):
            for mono in comp.off_degree_terms(weights, weights[j] - degree):
                bad.append((j, mono))
        return bad

    def is_homogeneous(self, weights: Sequence[int], degree: int) -> bool:
        return not self.homogeneity_defects(weights, degree)

    def coefficient_vector(self) -> Dict:
        vec = {}
        for j, p in enumerate(self.components):
            for m, c in p.terms.items():
                vec[(j, m)] = c
        return vec

    def to_json(self) -> list:
        return [{"var": j, "poly": p.to_json()} for j, p in enumerate(self.components) if p]

    def __str__(self) -> str:
        parts = [f"({p})*d{j}" for j, p in enumerate(self.components) if p]
        return " + ".join(parts) if parts else "0"


def _check_dims(a: VectorField, b: VectorField):
    if a.dim != b.dim:
        raise DimensionMismatch(f"fields live in R^{a.dim} and R^{b.dim}")


def bracket(a: VectorField, b: VectorField) -> VectorField:
    """Commutator [a, b] = a o b - b o a as first-order operators."""
    _check_dims(a, b)
    comps = tuple(a.apply(bc) - b.apply(ac) for ac, bc in zip(a.components, b.components))
    return VectorField(comps)


@dataclass(frozen=True)
class FieldSystem:
    fields: Tuple[VectorField, ...]
    dilation: Dilation
    names: Tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.dilation.n

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def q(self) -> int:
        return self.dilation.q

    @property
    def sigma(self) -> Tuple[int, ...]:
        return self.dilation.exponents

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "sigma": list(self.sigma),
            "fields": [{"coeffs": f.to_json()} for f in self.fields],
        }


def parse_field_system(spec: Mapping) -> FieldSystem:
    """Build and validate a FieldSystem from a structured description.

    ``spec`` has keys ``n``, ``m``, ``sigma`` and ``fields``; every field is
    ``{"coeffs": [{"var": j, "poly": [{"exps": [...], "num": a, "den": b}]}]}``.
    Raises BadDilation, NonHomogeneous, DependentFields or RankDeficientAtZero.
    """
    n = int(spec["n"])
    sigma = [int(s) for s in spec["sigma"]]
    if len(sigma) != n:
        raise BadDilation(f"sigma has {len(sigma)} entries, expected n={n}")
    dilation = Dilation(tuple(sigma))
    raw_fields = list(spec["fields"])
    m = int(spec.get("m", len(raw_fields)))
    if m != len(raw_fields):
        raise DimensionMismatch(f"m={m} but {len(raw_fields)} fields given")
    fields = []
    for item in raw_fields:
        comps = [Polynomial.zero(n) for _ in range(n)]
        for entry in item["coeffs"]:
            j = int(entry["var"])
            if not 0 <= j < n:
                raise DimensionMismatch(f"component index {j} outside 0..{n - 1}")
            for term in entry["poly"]:
                if len(term["exps"]) != n:
                    raise DimensionMismatch(f"monomial {term['exps']} needs {n} exponents")
            comps[j] = comps[j] + Polynomial.from_json(n, entry["poly"])
        fields.append(VectorField(tuple(comps)))
    names = tuple(spec.get("names", [f"X{i + 1}" for i in range(m)]))
    system = FieldSystem(tuple(fields), dilation, names)
    validate(system)
    return system


def validate(system: FieldSystem) -> None:
    w = system.sigma
    for i, f in enumerate(system.fields):
        bad = f.homogeneity_defects(w, 1)
        if bad:
            j, mono = bad[0]
            raise NonHomogeneous(
                f"field {i + 1} is not homogeneous of degree 1: monomial {list(mono)} "
                f"in component {j + 1}"
            )
    ech = SparseEchelon()
    for i, f in enumerate(system.fields):
        if f.is_zero() or not ech.add(f.coefficient_vector()):
            raise DependentFields(f"field {i + 1} is a combination of the previous ones")
    alg = generate_algebra(system)
    r = alg.rank_at([0] * system.n)
    if r < system.n:
        raise RankDeficientAtZero(r, system.n)


def load_field_system(path) -> FieldSystem:
    return parse_field_system(read_structured(path))


def read_structured(path) -> dict:
    """Read JSON, YAML or TOML depending on the file suffix."""
    path = Path(path)
    text = path.read_text()
    suffix = path.suffix.lower()
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    if suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text)
    return json.loads(text)


# -- stratified algebra ---------------------------------------------------

Word = Tuple[int, ...]


@dataclass
class StratifiedAlgebra:
    """Adapted basis of Lie(X_1..X_m) with exact structure constants.

    ``basis[k]`` is the vector field E_k, ``words[k]`` the right-nested bracket
    word that produced it (``(i, j, k)`` means [X_i, [X_j, X_k]]) and
    ``layer_of[k]`` its stratum. ``structure[(i, j)]`` lists c_{ij}^k.
    """

    system: FieldSystem
    basis: List[VectorField]
    words: List[Word]
    layer_of: List[int]
    structure: Dict[Tuple[int, int], Tuple[Fraction, ...]] = field(repr=False)

    @property
    def N(self) -> int:
        return len(self.basis)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def p(self) -> int:
        return self.N - self.n

    @property
    def step(self) -> int:
        return max(self.layer_of)

    @property
    def layers(self) -> List[List[int]]:
        out = [[] for _ in range(self.step)]
        for k, lay in enumerate(self.layer_of):
            out[lay - 1].append(k)
        return out

    @property
    def layer_dims(self) -> List[int]:
        return [len(l) for l in self.layers]

    def bracket_coords(self, i: int, j: int) -> Tuple[Fraction, ...]:
        if i == j:
            return tuple(Fraction(0) for _ in range(self.N))
        if (i, j) in self.structure:
            return self.structure[(i, j)]
        return tuple(-c for c in self.structure[(j, i)])

    def rank_at(self, x) -> int:
        """Rank of {E_k(x)} over the reals; exact for rational x."""
        if all(isinstance(v, (int, Fraction)) for v in x):
            rows = [[Fraction(v) for v in e.at(x)] for e in self.basis]
            return rank(rows)
        mat = np.array([[float(v) for v in e.at([float(c) for c in x])] for e in self.basis])
        return int(np.linalg.matrix_rank(mat))

    def jacobi_defect(self) -> int:
        """Number of (i, j, k, l) where the Jacobi identity fails exactly."""
        N = self.N
        bad = 0
        for i in range(N):
            for j in range(i + 1, N):
                for k in range(j + 1, N):
                    total = [Fraction(0)] * N
                    for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
                        inner = self.bracket_coords(b, c)
                        for l, cl in enumerate(inner):
                            if cl:
                                outer = self.bracket_coords(a, l)
                                for r in range(N):
                                    total[r] += cl * outer[r]
                    bad += sum(1 for v in total if v != 0)
        return bad

    def grading_ok(self) -> bool:
        for (i, j), coords in self.structure.items():
            target = self.layer_of[i] + self.layer_of[j]
            for k, c in enumerate(coords):
                if c and self.layer_of[k] != target:
                    return False
        return True

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "n": self.n,
            "p": self.p,
            "q": self.system.q,
            "step": self.step,
            "layers": self.layer_dims,
            "words": [list(w) for w in self.words],
            "basis": [e.to_json() for e in self.basis],
            "structure": [
                {"i": i, "j": j, "coeffs": [[c.numerator, c.denominator] for c in coords]}
                for (i, j), coords in sorted(self.structure.items())
                if any(coords)
            ],
        }


def generate_algebra(system: FieldSystem) -> StratifiedAlgebra:
    """Close span{X_i} under brackets layer by layer and pick an adapted basis.

    Layer s+1 candidates are [X_i, B] for generators X_i (in order) and basis
    elements B of layer s (in order); the first independent ones are kept.
    Depth is capped at sigma_n: a nonzero bracket beyond it means the input
    was not homogeneous as declared.
    """
    w = system.sigma
    r = w[-1]
    basis: List[VectorField] = list(system.fields)
    words: List[Word] = [(i,) for i in range(system.m)]
    layer_of = [1] * system.m
    current = list(range(system.m))
    for s in range(2, r + 2):
        ech = SparseEchelon()
        new_idx = []
        for i in range(system.m):
            for b in current:
                cand = bracket(system.fields[i], basis[b])
                if cand.is_zero():
                    continue
                if s > r:
                    raise InternalInconsistency(
                        f"nonzero bracket of degree {s} > sigma_n={r}: word {(i,) + words[b]}"
                    )
                if ech.add(cand.coefficient_vector()):
                    basis.append(cand)
                    words.append((i,) + words[b])
                    layer_of.append(s)
                    new_idx.append(len(basis) - 1)
        if not new_idx:
            break
        current = new_idx

    # structure constants, solved layer by layer
    per_layer: Dict[int, SparseEchelon] = {}
    layer_members: Dict[int, List[int]] = {}
    for k, lay in enumerate(layer_of):
        layer_members.setdefault(lay, []).append(k)
    for lay, members in layer_members.items():
        ech = SparseEchelon()
        for k in members:
            ech.add(basis[k].coefficient_vector())
        per_layer[lay] = ech
    N = len(basis)
    structure: Dict[Tuple[int, int], Tuple[Fraction, ...]] = {}
    for i in range(N):
        for j in range(i + 1, N):
            br = bracket(basis[i], basis[j])
            coords = [Fraction(0)] * N
            if not br.is_zero():
                lay = layer_of[i] + layer_of[j]
                if lay not in per_layer:
                    raise InternalInconsistency(f"[E{i}, E{j}] nonzero beyond the top layer")
                local = per_layer[lay].express(br.coefficient_vector())
                if local is None:
                    raise InternalInconsistency(f"[E{i}, E{j}] not in the generated algebra")
                for c, k in zip(local, layer_members[lay]):
                    coords[k] = c
            structure[(i, j)] = tuple(coords)
    return StratifiedAlgebra(system, basis, words, layer_of, structure)


def hoermander_rank(system: FieldSystem, x, algebra: Optional[StratifiedAlgebra] = None) -> int:
    alg = algebra or generate_algebra(system)
    return alg.rank_at(list(x))


def random_rational_points(n: int, count: int, seed: int = 0, scale: int = 5) -> List[List[Fraction]]:
    rng = random.Random(seed)
    return [
        [Fraction(rng.randint(-scale * 10, scale * 10), rng.randint(1, 10)) for _ in range(n)]
        for _ in range(count)
    ]


# -- example systems ------------------------------------------------------

def _field(n: int, entries: Mapping[int, Sequence[Tuple[Sequence[int], object]]]) -> VectorField:
    comps = [Polynomial.zero(n) for _ in range(n)]
    for j, terms in entries.items():
        comps[j] = Polynomial(n, {tuple(e): c for e, c in terms})
    return VectorField(tuple(comps))


def euclidean(n: int = 2) -> FieldSystem:
    fields = tuple(VectorField.coordinate(n, j) for j in range(n))
    return FieldSystem(fields, Dilation((1,) * n))


def grushin(k: int = 1) -> FieldSystem:
    """X1 = d1, X2 = x1^k d2 on R^2 (the paper's first example)."""
    x1 = Polynomial.monomial((k, 0))
    X1 = VectorField.coordinate(2, 0)
    X2 = VectorField((Polynomial.zero(2), x1))
    return FieldSystem((X1, X2), Dilation((1, k + 1)))


def chain_system(n: int) -> FieldSystem:
    """X1 = d1, X2 = x1 d2 + x2 d3 + ... + x_{n-1} d_n."""
    X1 = VectorField.coordinate(n, 0)
    comps = [Polynomial.zero(n)] + [Polynomial.variable(n, j - 1) for j in range(1, n)]
    return FieldSystem((X1, VectorField(tuple(comps))), Dilation(tuple(range(1, n + 1))))


def power_system(n: int) -> FieldSystem:
    """X1 = d1, X2 = x1 d2 + x1^2 d3 + ... + x1^{n-1} d_n."""
    X1 = VectorField.coordinate(n, 0)
    comps = [Polynomial.zero(n)]
    for j in range(1, n):
        mono = [0] * n
        mono[0] = j
        comps.append(Polynomial.monomial(mono))
    return FieldSystem((X1, VectorField(tuple(comps))), Dilation(tuple(range(1, n + 1))))


EXAMPLES = {
    "euclidean": lambda: euclidean(2),
    "grushin": lambda: grushin(1),
    "grushin2": lambda: grushin(2),
    "chain3": lambda: chain_system(3),
    "power3": lambda: power_system(3),
    "power4": lambda: power_system(4),
}


def example(name: str) -> FieldSystem:
    try:
        system = EXAMPLES[name]()
    except KeyError:
        raise KeyError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}") from None
    validate(system)
    return system
