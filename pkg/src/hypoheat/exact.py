"""Exact rational linear algebra on small dense or sparse systems."""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, Hashable, List, Optional, Sequence


class SparseEchelon:
    """Incremental row-echelon basis for sparse rational vectors.

    Vectors are dicts ``key -> Fraction``. ``add`` reduces a vector against the
    current basis and keeps it when it is independent. ``express`` returns the
    coordinates of a vector in terms of the vectors added so far.
    """

    def __init__(self):
        self._rows: List[Dict[Hashable, Fraction]] = []
        self._pivots: List[Hashable] = []
        # combination of original vectors giving each echelon row
        self._combos: List[Dict[int, Fraction]] = []
        self._count = 0

    def __len__(self) -> int:
        return len(self._rows)

    def _reduce(self, vec):
        vec = {k: Fraction(v) for k, v in vec.items() if v}
        combo: Dict[int, Fraction] = {}
        for row, piv, rc in zip(self._rows, self._pivots, self._combos):
            c = vec.get(piv)
            if not c:
                continue
            factor = c / row[piv]
            for k, v in row.items():
                nv = vec.get(k, Fraction(0)) - factor * v
                if nv:
                    vec[k] = nv
                else:
                    vec.pop(k, None)
            for k, v in rc.items():
                combo[k] = combo.get(k, Fraction(0)) - factor * v
        return vec, combo

    def is_independent(self, vec) -> bool:
        reduced, _ = self._reduce(vec)
        return bool(reduced)

    def add(self, vec) -> bool:
        reduced, combo = self._reduce(vec)
        if not reduced:
            return False
        idx = self._count
        self._count += 1
        combo[idx] = combo.get(idx, Fraction(0)) + 1
        pivot = min(reduced, key=_sort_key)
        self._rows.append(reduced)
        self._pivots.append(pivot)
        self._combos.append({k: v for k, v in combo.items() if v})
        return True

    def express(self, vec) -> Optional[List[Fraction]]:
        """Coordinates of ``vec`` w.r.t. the added vectors, or None if outside the span."""
        reduced, combo = self._reduce(vec)
        if reduced:
            return None
        # vec - sum(...) = 0 where combo tracks the negative multiples
        coords = [Fraction(0)] * self._count
        for k, v in combo.items():
            coords[k] = -v
        return coords


def _sort_key(k):
    return repr(k)


def rank(rows: Sequence[Sequence]) -> int:
    """Exact rank of a dense matrix given as a list of rows."""
    ech = SparseEchelon()
    r = 0
    for row in rows:
        if ech.add({j: Fraction(v) for j, v in enumerate(row) if v}):
            r += 1
    return r


def inverse(matrix: Sequence[Sequence]) -> List[List[Fraction]]:
    """Exact inverse by Gauss-Jordan elimination; raises on singular input."""
    n = len(matrix)
    a = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)]
         for i, row in enumerate(matrix)]
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            raise ZeroDivisionError("singular matrix")
        a[col], a[piv] = a[piv], a[col]
        p = a[col][col]
        a[col] = [v / p for v in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [row[n:] for row in a]
