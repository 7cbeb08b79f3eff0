"""Fitted constants for inequality families and deterministic seeding."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np


class FitFailure(RuntimeError):
    """No admissible constant exists over the probe set."""

    def __init__(self, message: str, probe: Any = None):
        super().__init__(message)
        self.probe = probe


@dataclass
class BoundFit:
    """Constants certifying an inequality family over a finite probe set.

    ``margin`` is the smallest slack ratio over the probes (>= 1 means every
    probe holds with the reported constants); ``tightest`` describes the probe
    attaining it.
    """

    family: str
    constants: Dict[str, float]
    probes: int
    margin: float = float("nan")
    tightest: Optional[Any] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.probes == 0 or bool(np.all(np.isfinite(list(self.constants.values()))))

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "constant": {k: _clean(v) for k, v in self.constants.items()},
            "probes": self.probes,
            "max_violation": _clean(self.margin),
            "tightest": _clean(self.tightest),
            **({"extra": {k: _clean(v) for k, v in self.extra.items()}} if self.extra else {}),
        }


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    return v


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)) and tag >= 0:
        return int(tag)
    digest = hashlib.sha256(repr(tag).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Generator for a named sub-stream of a root seed.

    The stream is ``SeedSequence([seed, h(tag_1), h(tag_2), ...])`` where
    integer tags are used as is and other tags are hashed with SHA-256, so the
    derived streams do not depend on call order.
    """
    entropy = [_tag_int(seed)] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def geometric_grid_search(predicate, lo: int = 0, hi: int = 10) -> Optional[int]:
    """Smallest k in lo..hi with predicate(2**k) true, or None."""
    for k in range(lo, hi + 1):
        if predicate(2.0 ** k):
            return k
    return None
