"""Keyed, reproducible random streams.

Every stochastic component derives its own generator from a tuple key
(seed plus integer/string tags) instead of sharing a global RNG, so results
are independent of worker count and execution order. Strings are folded with
FNV-1a so keys stay stable across processes and Python versions.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fold(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        h = _FNV_OFFSET
        for b in part.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
        return h
    raise TypeError(f"stream key parts must be int or str, got {type(part)!r}")


def stream(*key) -> np.random.Generator:
    """Return an independent generator keyed by the given parts.

    Identical keys always produce identical generators.
    """
    entropy = tuple(_fold(p) for p in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))
