"""Empirical distributions with a fixed integer denominator.

A histogram with denominator ``kappa`` over an alphabet of size ``d`` is a
length-``d`` vector of non-negative integer counts summing to ``kappa``; the
cell probabilities are ``counts / kappa``. These index the third axis of the
Q-table, so enumeration order must be stable: we use colexicographic order on
the count vectors, which admits an O(d) rank formula through cumulative
binomial coefficients.

Counts are always integers (never floats) so the denominator constraint is
exact; probabilities are derived views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BudgetError

_INT64_MAX = np.iinfo(np.int64).max


def num_histograms(alphabet_size: int, kappa: int) -> int:
    """Stars-and-bars count C(kappa + alphabet_size - 1, alphabet_size - 1)."""
    if alphabet_size < 1 or kappa < 1:
        raise ValueError("alphabet_size and kappa must be >= 1")
    return math.comb(kappa + alphabet_size - 1, alphabet_size - 1)


@dataclass(frozen=True)
class Alphabet:
    """A finite cell set, optionally labelled."""

    size: int
    labels: tuple | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("alphabet size must be >= 1")
        if self.labels is not None and len(self.labels) != self.size:
            raise ValueError("labels length must equal alphabet size")


@dataclass(frozen=True)
class Histogram:
    """Integer count vector summing to ``kappa``.

    ``joint_shape`` declares a product alphabet |S| x |A| (cells flattened
    state-major, cell = s * n_actions + a); it is required for ``marginal``.
    """

    counts: tuple
    kappa: int
    joint_shape: tuple | None = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        if sum(counts) != self.kappa:
            raise ValueError(f"counts sum {sum(counts)} != kappa {self.kappa}")
        if self.joint_shape is not None:
            ns, na = self.joint_shape
            if ns * na != len(counts):
                raise ValueError("joint_shape does not match counts length")

    @property
    def alphabet_size(self) -> int:
        return len(self.counts)

    @property
    def probs(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64) / self.kappa

    def counts_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


def marginal(z: Histogram, axis: str = "state") -> Histogram:
    """Collapse a joint S x A histogram onto states or actions.

    The returned histogram keeps the same denominator.
    """
    if z.joint_shape is None:
        raise ValueError("histogram does not declare a product alphabet")
    ns, na = z.joint_shape
    grid = np.asarray(z.counts, dtype=np.int64).reshape(ns, na)
    if axis == "state":
        out = grid.sum(axis=1)
    elif axis == "action":
        out = grid.sum(axis=0)
    else:
        raise ValueError("axis must be 'state' or 'action'")
    return Histogram(tuple(int(c) for c in out), z.kappa)


def _as_prob_vector(p) -> np.ndarray:
    if isinstance(p, Histogram):
        return p.probs
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a 1-d probability vector")
    return arr


def tv_distance(p, q) -> float:
    """Total variation distance 0.5 * sum |p - q| between two pmfs or
    histograms on the same alphabet."""
    pv, qv = _as_prob_vector(p), _as_prob_vector(q)
    if pv.shape != qv.shape:
        raise ValueError(f"alphabet mismatch: {pv.shape} vs {qv.shape}")
    return 0.5 * float(np.abs(pv - qv).sum())


class HistogramIndex:
    """Bijective rank/unrank between histograms and [0, total).

    Rank order is colexicographic on count vectors: vectors compare by their
    last differing coordinate. Binomials come from a Pascal-triangle cache in
    int64 with an explicit overflow check, so ranks never wrap silently.
    """

    def __init__(self, alphabet_size: int, kappa: int):
        self.alphabet_size = int(alphabet_size)
        self.kappa = int(kappa)
        total = num_histograms(self.alphabet_size, self.kappa)
        if total > _INT64_MAX:
            raise BudgetError(
                f"histogram count {total} for alphabet {alphabet_size}, "
                f"kappa {kappa} exceeds 64-bit range"
            )
        self.total = total
        # choose[n, k] for n <= kappa + alphabet_size, k <= alphabet_size
        self._choose = _pascal_table(self.kappa + self.alphabet_size, self.alphabet_size)

    def rank(self, h) -> int:
        """Position of ``h`` in the colex enumeration."""
        counts = h.counts_array() if isinstance(h, Histogram) else np.asarray(h, dtype=np.int64)
        if counts.shape != (self.alphabet_size,):
            raise ValueError("histogram does not match this index's alphabet")
        if counts.sum() != self.kappa:
            raise ValueError("histogram does not match this index's kappa")
        return int(self.rank_rows(counts[None, :])[0])

    def rank_rows(self, counts: np.ndarray) -> np.ndarray:
        """Vectorized rank of each row of an (m, alphabet_size) count matrix."""
        counts = np.asarray(counts, dtype=np.int64)
        pre = np.cumsum(counts, axis=1)  # K_j, j = 1..d
        d = self.alphabet_size
        ch = self._choose
        ranks = np.zeros(counts.shape[0], dtype=np.int64)
        for j in range(2, d + 1):
            ranks += ch[pre[:, j - 1] + j - 1, j - 1] - ch[pre[:, j - 2] + j - 1, j - 1]
        return ranks

    def unrank(self, idx: int) -> Histogram:
        """Histogram at position ``idx`` of the colex enumeration."""
        if not 0 <= idx < self.total:
            raise ValueError(f"rank {idx} out of range [0, {self.total})")
        return Histogram(tuple(self.unrank_counts(idx)), self.kappa)

    def unrank_counts(self, idx: int) -> list:
        r = int(idx)
        d = self.alphabet_size
        ch = self._choose
        rem = self.kappa
        counts = [0] * d
        for j in range(d, 1, -1):
            # largest u with (number of colex-smaller tails) <= r
            u = 0
            while u < rem:
                off = ch[rem + j - 1, j - 1] - ch[rem - (u + 1) + j - 1, j - 1]
                if off > r:
                    break
                u += 1
            off = ch[rem + j - 1, j - 1] - ch[rem - u + j - 1, j - 1]
            counts[j - 1] = u
            r -= int(off)
            rem -= u
        counts[0] = rem
        return counts


@lru_cache(maxsize=None)
def _pascal_table(max_n: int, max_k: int) -> np.ndarray:
    check = math.comb(max_n, min(max_k, max_n // 2))
    if check > _INT64_MAX:
        raise BudgetError(f"binomial C({max_n},{max_k}) exceeds 64-bit range")
    table = np.zeros((max_n + 1, max_k + 1), dtype=np.int64)
    table[:, 0] = 1
    for n in range(1, max_n + 1):
        hi = min(n, max_k)
        table[n, 1 : hi + 1] = table[n - 1, 1 : hi + 1] + table[n - 1, 0:hi]
    return table


@lru_cache(maxsize=None)
def get_index(alphabet_size: int, kappa: int) -> HistogramIndex:
    """Shared read-only index cache."""
    return HistogramIndex(alphabet_size, kappa)


def _compositions(parts: int, total: int):
    """All weak compositions of ``total`` into ``parts``, colex ascending."""
    if parts == 1:
        yield (total,)
        return
    for last in range(total + 1):
        for prefix in _compositions(parts - 1, total - last):
            yield prefix + (last,)


def enumerate_histograms(alphabet_size: int, kappa: int, joint_shape=None):
    """Yield every histogram once, in rank (colex) order."""
    total = num_histograms(alphabet_size, kappa)
    if total > _INT64_MAX:
        raise BudgetError(f"histogram count {total} exceeds 64-bit range")
    for counts in _compositions(alphabet_size, kappa):
        yield Histogram(counts, kappa, joint_shape=joint_shape)


def fiber(g: Histogram, action_alphabet: Alphabet):
    """All joint S x A histograms whose state marginal equals ``g``.

    Per state s the g.counts[s] units are distributed freely over actions, so
    the fiber size is the product of per-state stars-and-bars counts.
    """
    na = action_alphabet.size
    ns = g.alphabet_size
    per_state = [list(_compositions(na, c)) for c in g.counts]

    def rec(s, acc):
        if s == ns:
            yield Histogram(tuple(acc), g.kappa, joint_shape=(ns, na))
            return
        for comp in per_state[s]:
            yield from rec(s + 1, acc + list(comp))

    yield from rec(0, [])


def fiber_size(g: Histogram, n_actions: int) -> int:
    return math.prod(math.comb(c + n_actions - 1, n_actions - 1) for c in g.counts)


def nearest_histogram(pmf: np.ndarray, kappa: int) -> np.ndarray:
    """Round a pmf to the closest kappa-denominator count vector.

    Largest-remainder rounding; ties go to the lowest cell index so the
    result is deterministic.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    scaled = pmf * kappa
    base = np.floor(scaled).astype(np.int64)
    shortfall = kappa - int(base.sum())
    if shortfall > 0:
        remainders = scaled - base
        order = np.lexsort((np.arange(len(pmf)), -remainders))
        base[order[:shortfall]] += 1
    return base
