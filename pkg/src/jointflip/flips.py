"""Shared sign-flip plans.

A plan is a ``w x n`` matrix of +/-1 entries whose first row is the
identity flip.  The same plan is applied to every response so that the
flipped statistics keep the responses' dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TooLarge

#: Bit generator behind random plans.  Philox is counter-based, so a plan
#: depends only on (seed, n, w), never on thread count or call order.
GENERATOR = "philox4x64-v1"
DEFAULT_FLIPS = 2000
MAX_EXHAUSTIVE_N = 20


@dataclass(frozen=True)
class FlipPlan:
    signs: np.ndarray
    seed: int | None = None
    exhaustive: bool = False
    generator: str = GENERATOR

    @property
    def w(self) -> int:
        return self.signs.shape[0]

    @property
    def n(self) -> int:
        return self.signs.shape[1]


def make_plan(n: int, w: int = DEFAULT_FLIPS, seed: int = 0) -> FlipPlan:
    """Identity row followed by ``w - 1`` rows drawn uniformly, with replacement."""
    if n < 1 or w < 2:
        raise ValueError(f"need n >= 1 and w >= 2, got n={n}, w={w}")
    rng = np.random.Generator(np.random.Philox(seed))
    signs = np.empty((w, n), dtype=np.int8)
    signs[0] = 1
    signs[1:] = 1 - 2 * rng.integers(0, 2, size=(w - 1, n), dtype=np.int8)
    signs.setflags(write=False)
    return FlipPlan(signs=signs, seed=int(seed), exhaustive=False)


def make_exhaustive(n: int) -> FlipPlan:
    """All ``2**n`` sign vectors.

    Row ``r`` flips observation ``i`` when bit ``i`` of ``r`` is set, so
    row 0 is the identity and row ``2**n - 1 - r`` is the negation of
    row ``r``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if n > MAX_EXHAUSTIVE_N:
        raise TooLarge(f"exhaustive plan needs 2**{n} rows; limit is n <= {MAX_EXHAUSTIVE_N}")
    rows = np.arange(2**n, dtype=np.int64)[:, None]
    bits = (rows >> np.arange(n, dtype=np.int64)) & 1
    signs = (1 - 2 * bits).astype(np.int8)
    signs.setflags(write=False)
    return FlipPlan(signs=signs, seed=None, exhaustive=True, generator="exhaustive")
