"""Graphon-weighted neighbor subsampling and neighborhood aggregates.

Each agent i draws kappa neighbor ids i.i.d. from the normalized weight row
w_bar[i, .] on [n] \\ {i}. Rows are preprocessed into alias tables once per
weight matrix (O(n) build), so draws are O(1) and online execution can afford
fresh samples for every agent at every time step.

Sampling is embarrassingly parallel across agents; callers pass per-worker
generators derived from keyed streams so results are schedule-independent.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np

from .graphon import WeightMatrix
from .histograms import Histogram


class AliasTable:
    """Vose alias method for a fixed categorical distribution.

    Draws consume exactly two uniforms each, which keeps sampling replayable
    from frozen uniform blocks.
    """

    def __init__(self, probs: np.ndarray, support: np.ndarray | None = None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(probs < 0):
            raise ValueError("probs must be non-negative")
        total = float(probs.sum())
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError("probs must sum to 1")
        k = probs.size
        self.support = np.arange(k) if support is None else np.asarray(support)
        scaled = probs * k / total
        self.prob = np.ones(k)
        self.alias = np.arange(k)
        small = [i for i in range(k) if scaled[i] < 1.0]
        large = [i for i in range(k) if scaled[i] >= 1.0]
        scaled = scaled.copy()
        while small and large:
            s, l = small.pop(), large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] = scaled[l] - (1.0 - scaled[s])
            (small if scaled[l] < 1.0 else large).append(l)
        for rest in (small, large):
            for i in rest:
                self.prob[i] = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random((2, size))
        return self.sample_from_uniforms(u[0], u[1])

    def sample_from_uniforms(self, u_bucket: np.ndarray, u_accept: np.ndarray) -> np.ndarray:
        k = self.prob.size
        buckets = np.minimum((u_bucket * k).astype(np.int64), k - 1)
        chosen = np.where(u_accept < self.prob[buckets], buckets, self.alias[buckets])
        return self.support[chosen]


_ALIAS_CACHE: "weakref.WeakKeyDictionary[WeightMatrix, dict]" = weakref.WeakKeyDictionary()


def row_alias(weights: WeightMatrix, i: int) -> AliasTable:
    """Alias table for row i of the normalized weights, built once."""
    per_matrix = _ALIAS_CACHE.setdefault(weights, {})
    table = per_matrix.get(i)
    if table is None:
        others = np.concatenate([np.arange(i), np.arange(i + 1, weights.n)])
        table = AliasTable(weights.normalized[i, others], support=others)
        per_matrix[i] = table
    return table


@dataclass(frozen=True)
class NeighborSample:
    """Multiset of kappa neighbor ids drawn for one agent."""

    agent: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        if np.any(idx == self.agent):
            raise ValueError("a neighbor sample may not contain the focal agent")

    @property
    def kappa(self) -> int:
        return int(self.indices.size)


def sample_neighbors(weights: WeightMatrix, i: int, kappa: int,
                     rng: np.random.Generator) -> NeighborSample:
    """kappa i.i.d. draws from the normalized row; repetition allowed."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if not 0 <= i < weights.n:
        raise ValueError(f"agent id {i} out of range")
    ids = row_alias(weights, i).sample(rng, kappa)
    return NeighborSample(agent=i, indices=ids)


def empirical_joint(sample: NeighborSample, states, actions,
                    n_states: int, n_actions: int) -> Histogram:
    """Joint (state, action) histogram of the sampled neighbors."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    if len(states) != len(actions):
        raise ValueError("states and actions must share length n")
    cells = states[sample.indices] * n_actions + actions[sample.indices]
    counts = np.bincount(cells, minlength=n_states * n_actions)
    return Histogram(tuple(int(c) for c in counts), sample.kappa,
                     joint_shape=(n_states, n_actions))


def empirical_marginal(sample: NeighborSample, states, n_states: int) -> Histogram:
    """State histogram of the sampled neighbors."""
    states = np.asarray(states)
    counts = np.bincount(states[sample.indices], minlength=n_states)
    return Histogram(tuple(int(c) for c in counts), sample.kappa)


def exact_aggregate(weights: WeightMatrix, i: int, states, actions,
                    n_states: int, n_actions: int) -> np.ndarray:
    """The kappa -> infinity target: sum_j w_bar[i, j] at cell (s_j, a_j)."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    if len(states) != weights.n or len(actions) != weights.n:
        raise ValueError("states and actions must have length n")
    cells = states * n_actions + actions
    out = np.zeros(n_states * n_actions)
    np.add.at(out, cells, weights.normalized[i])
    return out


def exact_state_aggregate(weights: WeightMatrix, i: int, states, n_states: int) -> np.ndarray:
    states = np.asarray(states)
    out = np.zeros(n_states)
    np.add.at(out, states, weights.normalized[i])
    return out


def exact_state_aggregates(weights: WeightMatrix, states, n_states: int) -> np.ndarray:
    """All agents' exact state aggregates at once: row i is g_i."""
    states = np.asarray(states)
    onehot = np.zeros((weights.n, n_states))
    onehot[np.arange(weights.n), states] = 1.0
    return weights.normalized @ onehot


@dataclass(frozen=True)
class HTEstimate:
    """Importance-weighted neighborhood estimate under a proposal.

    The estimate is unbiased for the exact aggregate but may leave the
    probability simplex pointwise; ``normalized()`` renormalizes for
    consumers that need a pmf.
    """

    agent: int
    proposal: np.ndarray
    ratios: np.ndarray
    estimate: np.ndarray

    def normalized(self) -> np.ndarray:
        total = float(self.estimate.sum())
        if total <= 0.0:
            return np.full_like(self.estimate, 1.0 / self.estimate.size)
        return self.estimate / total


def ht_estimate(weights: WeightMatrix, i: int, proposal, kappa: int,
                states, actions, n_states: int, n_actions: int,
                rng: np.random.Generator) -> HTEstimate:
    """Horvitz-Thompson estimate of the joint aggregate from proposal draws.

    Draws J_1..J_kappa i.i.d. from the proposal over [n] \\ {i} and weights
    each indicator by rho = w_bar[i, J] / q(J).
    """
    proposal = np.asarray(proposal, dtype=np.float64)
    if proposal.shape != (weights.n,):
        raise ValueError("proposal must be a pmf over all n agents")
    if proposal[i] != 0.0:
        raise ValueError("proposal must place zero mass on the focal agent")
    if not math.isclose(float(proposal.sum()), 1.0, abs_tol=1e-9):
        raise ValueError("proposal must sum to 1")
    row = weights.normalized[i]
    if np.any((row > 0) & (proposal <= 0)):
        raise ValueError("proposal must be positive wherever w_bar[i, .] is positive")
    states = np.asarray(states)
    actions = np.asarray(actions)

    others = np.concatenate([np.arange(i), np.arange(i + 1, weights.n)])
    table = AliasTable(proposal[others], support=others)
    draws = table.sample(rng, kappa)
    ratios = row[draws] / proposal[draws]
    cells = states[draws] * n_actions + actions[draws]
    est = np.zeros(n_states * n_actions)
    np.add.at(est, cells, ratios / kappa)
    return HTEstimate(agent=i, proposal=proposal, ratios=ratios, estimate=est)


def tv_concentration_bound(n_states: int, kappa: int, delta: float) -> float:
    """High-probability TV radius for a kappa-sample empirical distribution
    on a finite alphabet: sqrt((|S| ln 2 + ln(2/delta)) / (2 kappa))."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt((n_states * math.log(2.0) + math.log(2.0 / delta)) / (2.0 * kappa))
