"""Learning core: surrogate dynamics, Bellman operators, value iteration.

The Q-function is a dense table Q(s, a, h) where h ranks either a joint
(state, action) histogram ("joint" mode) or its state marginal ("marginal"
mode) with denominator kappa. Marginal mode is only legal when the
environment declares that rewards and transitions depend on neighbors solely
through the state marginal; joint mode is always legal.

Surrogate one-step dynamics for an entry (s, a, h): the focal agent
transitions through P(. | s, a, g_h); each of the kappa neighbors transitions
through P(. | x_m, u_m, g_m), where g_m is either the leave-one-out aggregate
over the other kappa agents (focal included, neighbor m excluded, weight
1/kappa each) or the shared marginal g_h, selected by ``aggregate_rule``.
Neighbor actions u_m come from the joint histogram in joint mode; in marginal
mode they are assigned by ``neighbor_action_rule``: "greedy" picks the argmax
action of the current Q at (x_m, g_m), "uniform" draws uniformly over actions.

Value iteration applies the empirical operator with per-entry sample sets
that are frozen across sweeps (streams keyed by seed and entry rank), so the
iteration is a fixed gamma-contraction and the residual decays geometrically
to the sample-operator fixed point.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .env import Environment, StochasticRewardEnv, local_reward, step_distribution
from .errors import BudgetError, GmfsError
from .histograms import (
    Histogram,
    HistogramIndex,
    fiber,
    get_index,
    marginal as hist_marginal,
    num_histograms,
    Alphabet,
)
from .rng import stream

MODES = ("joint", "marginal")
AGGREGATE_RULES = ("leave_one_out", "shared")
ACTION_RULES = ("greedy", "uniform")

DEFAULT_EPSILON = 1e-4
DEFAULT_ITERATIONS = 250
DEFAULT_ENUMERATION_CAP = 1_000_000
MAX_TABLE_ENTRIES = 50_000_000


# ---------------------------------------------------------------------------
# Q-table
# ---------------------------------------------------------------------------


@dataclass
class QTable:
    mode: str
    kappa: int
    n_states: int
    n_actions: int
    values: np.ndarray  # (S, A, n_histograms)
    gamma: float
    env_name: str = ""
    seed: int = 0
    iterations: int = 0
    residual: float = float("inf")
    residual_history: list = field(default_factory=list, repr=False, compare=False)
    sup_history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        expected = (self.n_states, self.n_actions, self.histogram_count())
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != expected:
            raise ValueError(f"values shape {values.shape} != {expected}")
        self.values = values

    def alphabet_size(self) -> int:
        return self.n_states * self.n_actions if self.mode == "joint" else self.n_states

    def histogram_count(self) -> int:
        return num_histograms(self.alphabet_size(), self.kappa)

    def index(self) -> HistogramIndex:
        return get_index(self.alphabet_size(), self.kappa)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    @staticmethod
    def zeros(mode: str, kappa: int, n_states: int, n_actions: int, gamma: float,
              env_name: str = "", seed: int = 0) -> "QTable":
        alphabet = n_states * n_actions if mode == "joint" else n_states
        count = num_histograms(alphabet, kappa)
        entries = n_states * n_actions * count
        if entries > MAX_TABLE_ENTRIES:
            raise BudgetError(
                f"table with {entries} entries exceeds the memory budget "
                f"({MAX_TABLE_ENTRIES})"
            )
        return QTable(mode, kappa, n_states, n_actions,
                      np.zeros((n_states, n_actions, count)), gamma,
                      env_name=env_name, seed=seed)


def table_size(mode: str, kappa: int, n_states: int, n_actions: int) -> int:
    alphabet = n_states * n_actions if mode == "joint" else n_states
    return n_states * n_actions * num_histograms(alphabet, kappa)


# ---------------------------------------------------------------------------
# Fiber caches and the backup M Q(s, g) = max over actions and completions
# ---------------------------------------------------------------------------

_FIBER_CACHE: dict = {}


def fiber_ranks(n_states: int, n_actions: int, kappa: int, g_rank: int) -> np.ndarray:
    """Ranks (joint index) of all completions of the marginal of rank g_rank,
    sorted ascending so ties break toward the lowest joint rank."""
    key = (n_states, n_actions, kappa, g_rank)
    out = _FIBER_CACHE.get(key)
    if out is None:
        g_index = get_index(n_states, kappa)
        z_index = get_index(n_states * n_actions, kappa)
        g = g_index.unrank(g_rank)
        ranks = sorted(z_index.rank(z) for z in fiber(g, Alphabet(n_actions)))
        out = np.asarray(ranks, dtype=np.int64)
        _FIBER_CACHE[key] = out
    return out


def fiber_backup(q: QTable, s_next: int, g_next) -> float:
    """max over a' (and, in joint mode, all completions z' of g') of Q."""
    if isinstance(g_next, Histogram):
        g_rank = get_index(q.n_states, q.kappa).rank(g_next)
    else:
        g_rank = int(g_next)
    if q.mode == "marginal":
        return float(q.values[s_next, :, g_rank].max())
    ranks = fiber_ranks(q.n_states, q.n_actions, q.kappa, g_rank)
    return float(q.values[s_next, :, ranks].max())


def fiber_argmax(q: QTable, s: int, g_rank: int) -> int:
    """Greedy action at (s, g); ties break to the lowest (a, rank z) pair."""
    if q.mode == "marginal":
        return int(np.argmax(q.values[s, :, g_rank]))
    ranks = fiber_ranks(q.n_states, q.n_actions, q.kappa, g_rank)
    best_a, best_v = 0, -math.inf
    for a in range(q.n_actions):
        v = float(q.values[s, a, ranks].max())
        if v > best_v:
            best_a, best_v = a, v
    return best_a


# ---------------------------------------------------------------------------
# Surrogate one-step dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateState:
    """Focal (s, a) plus the kappa neighbor (state, action) pairs expanded
    from the entry histogram; the pair tally reproduces the histogram.
    Marginal-mode histograms carry states only (actions None)."""

    focal: tuple
    neighbor_states: np.ndarray
    neighbor_actions: np.ndarray | None

    @property
    def kappa(self) -> int:
        return int(self.neighbor_states.size)


def expand_surrogate(s: int, a: int, hist: Histogram) -> SurrogateState:
    """Deterministic cell-major expansion of a histogram into agents."""
    if hist.joint_shape is not None:
        ns, na = hist.joint_shape
        states, actions = [], []
        for cell, count in enumerate(hist.counts):
            if count:
                states.extend([cell // na] * count)
                actions.extend([cell % na] * count)
        return SurrogateState((s, a), np.asarray(states, dtype=np.int64),
                              np.asarray(actions, dtype=np.int64))
    states = []
    for x, count in enumerate(hist.counts):
        if count:
            states.extend([x] * count)
    return SurrogateState((s, a), np.asarray(states, dtype=np.int64), None)


def _neighbor_marginal(env: Environment, counts: np.ndarray, focal_state: int,
                       x: int, kappa: int, aggregate_rule: str) -> np.ndarray:
    """Counts of the aggregate seen by a neighbor in state x."""
    if aggregate_rule == "shared":
        return counts
    out = counts.copy()
    out[x] -= 1
    out[focal_state] += 1
    return out


def _greedy_action(q: QTable, x: int, gm_counts: np.ndarray) -> int:
    g_rank = get_index(q.n_states, q.kappa).rank_rows(gm_counts[None, :])[0]
    return fiber_argmax(q, x, int(g_rank))


def surrogate_step(env: Environment, s: int, a: int, hist: Histogram,
                   rng: np.random.Generator, *, q: QTable | None = None,
                   neighbor_action_rule: str = "uniform",
                   aggregate_rule: str = "leave_one_out"):
    """One draw of the (kappa+1)-agent surrogate transition.

    Returns (s_next, next_aggregate): the focal agent's next state and the
    empirical histogram of the neighbors' next states (marginal input) or
    next (state, action) pairs (joint input; next actions assigned by
    ``neighbor_action_rule``).

    Draw order is fixed: one uniform for the focal transition, then one per
    neighbor in state-major histogram order (the uniform action rule draws
    from the action-mixture law, so it also consumes one uniform per
    neighbor); this makes outcomes replayable from a frozen uniform block.
    """
    if aggregate_rule not in AGGREGATE_RULES:
        raise ValueError(f"aggregate_rule must be one of {AGGREGATE_RULES}")
    if neighbor_action_rule not in ACTION_RULES:
        raise ValueError(f"neighbor_action_rule must be one of {ACTION_RULES}")
    joint_input = hist.joint_shape is not None
    kappa = hist.kappa
    agents = expand_surrogate(s, a, hist)
    nb_states, nb_actions = agents.neighbor_states, agents.neighbor_actions
    g_counts = (hist_marginal(hist) if joint_input else hist).counts_array()
    g_probs = g_counts / kappa

    if nb_actions is None and neighbor_action_rule == "greedy" and q is None:
        raise ValueError("greedy neighbor actions need the current Q-table")

    uniforms = rng.random(kappa + 1)
    focal_pmf = step_distribution(env, s, a, g_probs)
    s_next = int(np.searchsorted(np.cumsum(focal_pmf), uniforms[0], side="right"))
    s_next = min(s_next, env.n_states - 1)

    next_states = np.empty(kappa, dtype=np.int64)
    for m in range(kappa):
        x = int(nb_states[m])
        gm = _neighbor_marginal(env, g_counts, s, x, kappa, aggregate_rule)
        known = None if nb_actions is None else int(nb_actions[m])
        pmf = _neighbor_pmf(env, q, x, gm, kappa, neighbor_action_rule, known_action=known)
        nxt = int(np.searchsorted(np.cumsum(pmf), uniforms[1 + m], side="right"))
        next_states[m] = min(nxt, env.n_states - 1)

    if not joint_input:
        counts = np.bincount(next_states, minlength=env.n_states)
        return s_next, Histogram(tuple(int(c) for c in counts), kappa)

    # joint input: assign next actions to report a full histogram; operators
    # only consume its marginal
    next_g = np.bincount(next_states, minlength=env.n_states)
    if neighbor_action_rule == "uniform":
        next_actions = rng.integers(0, env.n_actions, size=kappa)
    else:
        if q is None:
            raise ValueError("greedy neighbor actions need the current Q-table")
        g_rank = int(get_index(env.n_states, kappa).rank_rows(next_g[None, :])[0])
        next_actions = np.asarray(
            [fiber_argmax(q, int(x), g_rank) for x in next_states], dtype=np.int64
        )
    cells = next_states * env.n_actions + next_actions
    counts = np.bincount(cells, minlength=env.n_states * env.n_actions)
    return s_next, Histogram(tuple(int(c) for c in counts), kappa,
                             joint_shape=(env.n_states, env.n_actions))


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def empirical_operator(env: Environment, q: QTable, s: int, a: int, hist: Histogram,
                       m: int, rng: np.random.Generator, *,
                       neighbor_action_rule: str = "uniform",
                       aggregate_rule: str = "leave_one_out") -> float:
    """Reward plus gamma times the mean of m fiber backups at i.i.d.
    surrogate outcomes."""
    if m < 1:
        raise ValueError("m must be >= 1")
    g_probs = (hist_marginal(hist) if hist.joint_shape else hist).probs
    r = local_reward(env, s, a, g_probs)
    if q.gamma == 0.0:
        return r
    backups = np.empty(m)
    for ell in range(m):
        s_next, agg = surrogate_step(
            env, s, a, hist, rng, q=q,
            neighbor_action_rule=neighbor_action_rule, aggregate_rule=aggregate_rule,
        )
        g_next = hist_marginal(agg) if agg.joint_shape else agg
        backups[ell] = fiber_backup(q, s_next, g_next)
    return r + q.gamma * float(np.mean(backups))


def _neighbor_pmf(env: Environment, q: QTable, x: int, gm_counts: np.ndarray,
                  kappa: int, neighbor_action_rule: str,
                  known_action: int | None = None) -> np.ndarray:
    """Per-neighbor next-state law, marginalized over the action rule."""
    gm_probs = gm_counts / kappa
    if known_action is not None:
        return step_distribution(env, x, known_action, gm_probs)
    if neighbor_action_rule == "uniform":
        acc = np.zeros(env.n_states)
        for u in range(env.n_actions):
            acc += step_distribution(env, x, u, gm_probs)
        return acc / env.n_actions
    return step_distribution(env, x, _greedy_action(q, x, gm_counts), gm_probs)


def _histogram_distribution(pmfs, counts, n_states: int, kappa: int):
    """Distribution of the sum of independent multinomial draws.

    ``pmfs[k]`` is the next-state law shared by ``counts[k]`` neighbors.
    Returns (count_matrix, probabilities) over all reachable kappa-histograms.
    """
    dist = {(0,) * n_states: 1.0}
    for pmf, cnt in zip(pmfs, counts):
        for _ in range(cnt):
            nxt: dict = {}
            for key, p in dist.items():
                for x in range(n_states):
                    px = pmf[x]
                    if px == 0.0:
                        continue
                    new = list(key)
                    new[x] += 1
                    tk = tuple(new)
                    nxt[tk] = nxt.get(tk, 0.0) + p * px
            dist = nxt
    keys = np.asarray(sorted(dist.keys()), dtype=np.int64)
    probs = np.asarray([dist[tuple(k)] for k in keys])
    return keys, probs


def exact_operator(env: Environment, q: QTable, s: int, a: int, hist: Histogram, *,
                   neighbor_action_rule: str = "uniform",
                   aggregate_rule: str = "leave_one_out",
                   enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Exact expectation of the sampled backup; deterministic.

    Only legal while the worst-case surrogate outcome count |S|^(kappa+1)
    stays under the enumeration cap; larger instances must use the empirical
    operator.
    """
    kappa = hist.kappa
    outcomes = env.n_states ** (kappa + 1)
    if outcomes > enumeration_cap:
        raise BudgetError(
            f"exact operator needs {outcomes} outcome evaluations, "
            f"over the cap {enumeration_cap}; use the empirical operator"
        )
    joint_input = hist.joint_shape is not None
    agents = expand_surrogate(s, a, hist)
    nb_states = agents.neighbor_states
    nb_actions = agents.neighbor_actions
    g_counts = (hist_marginal(hist) if joint_input else hist).counts_array()
    g_probs = g_counts / kappa
    r = local_reward(env, s, a, g_probs)
    if q.gamma == 0.0:
        return r

    # group neighbors sharing (state, action, aggregate): identical next-state laws
    groups: dict = {}
    for m in range(kappa):
        x = int(nb_states[m])
        u = None if nb_actions is None else int(nb_actions[m])
        gm = _neighbor_marginal(env, g_counts, s, x, kappa, aggregate_rule)
        key = (x, u, tuple(gm))
        groups[key] = groups.get(key, 0) + 1
    pmfs, counts = [], []
    group_order = sorted(groups.items(),
                         key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1], kv[0][2]))
    for (x, u, gm), cnt in group_order:
        pmfs.append(_neighbor_pmf(env, q, x, np.asarray(gm), kappa,
                                  neighbor_action_rule, known_action=u))
        counts.append(cnt)
    hists, hist_probs = _histogram_distribution(pmfs, counts, env.n_states, kappa)
    g_index = get_index(env.n_states, kappa)
    g_ranks = g_index.rank_rows(hists)

    if q.mode == "marginal":
        m_values = q.values.max(axis=1)  # (S, G)
    else:
        m_values = np.empty((q.n_states, g_index.total))
        for gr in range(g_index.total):
            ranks = fiber_ranks(q.n_states, q.n_actions, q.kappa, gr)
            m_values[:, gr] = q.values[:, :, ranks].max(axis=(1, 2))

    focal_pmf = step_distribution(env, s, a, g_probs)
    cont = 0.0
    for s_next in range(env.n_states):
        ps = focal_pmf[s_next]
        if ps == 0.0:
            continue
        cont += ps * float(np.dot(hist_probs, m_values[s_next, g_ranks]))
    return r + q.gamma * cont


# ---------------------------------------------------------------------------
# Vectorized marginal-mode sweep engine
# ---------------------------------------------------------------------------


class _MarginalEngine:
    """Precomputed frozen-sample machinery for marginal-mode value iteration.

    Per-entry uniforms are drawn once from streams keyed by (seed, kappa,
    entry rank); a sweep is then a gather over the current table, which keeps
    the iteration an exact contraction and bit-reproducible for any worker
    count.
    """

    def __init__(self, env: Environment, kappa: int, m: int, seed: int, *,
                 neighbor_action_rule: str, aggregate_rule: str):
        if not env.marginal_sufficient:
            raise GmfsError(
                f"environment {env.name!r} does not declare marginal "
                "sufficiency; use joint mode"
            )
        self.env = env
        self.kappa = kappa
        self.m = m
        self.rule = neighbor_action_rule
        self.aggregate = aggregate_rule
        S, A = env.n_states, env.n_actions
        self.index = get_index(S, kappa)
        G = self.index.total
        self.n_entries = S * A * G

        hist_counts = np.empty((G, S), dtype=np.int64)
        for g in range(G):
            hist_counts[g] = self.index.unrank_counts(g)
        self.hist_counts = hist_counts
        hist_probs = hist_counts / kappa

        # kernel and reward tabulated at histogram points
        self.pmf = np.empty((S, A, G, S))
        self.rewards = np.empty((S, A, G))
        for s in range(S):
            for a in range(A):
                for g in range(G):
                    self.pmf[s, a, g] = step_distribution(env, s, a, hist_probs[g])
                    self.rewards[s, a, g] = local_reward(env, s, a, hist_probs[g])
        self.cdf = np.cumsum(self.pmf, axis=3)

        # per (g, focal_state, neighbor_state): rank of the neighbor's aggregate
        self.gm_rank = np.empty((G, S, S), dtype=np.int64)
        for g in range(G):
            for s in range(S):
                for x in range(S):
                    if hist_counts[g, x] == 0:
                        self.gm_rank[g, s, x] = 0  # unused slot
                        continue
                    gm = _neighbor_marginal(env, hist_counts[g], s, x, kappa, aggregate_rule)
                    self.gm_rank[g, s, x] = self.index.rank_rows(gm[None, :])[0]

        # entry layout: e = (s * A + a) * G + g
        entries = np.arange(self.n_entries)
        self.e_g = entries % G
        sa = entries // G
        self.e_a = sa % A
        self.e_s = sa // A

        # neighbor slots in state-major order per entry
        slot_states = np.empty((G, kappa), dtype=np.int64)
        for g in range(G):
            slot_states[g] = np.repeat(np.arange(S), hist_counts[g])
        self.slot_states = slot_states[self.e_g]                       # (E, kappa)
        self.slot_gm_rank = self.gm_rank[self.e_g[:, None],            # (E, kappa)
                                         self.e_s[:, None], self.slot_states]

        # frozen uniforms, one stream per entry so the reference per-entry
        # path reproduces the engine bit for bit
        uni = np.empty((self.n_entries, m, kappa + 1))
        for e in range(self.n_entries):
            uni[e] = stream(seed, "vi-frozen", kappa, e).random((m, kappa + 1))

        focal_cdf = self.cdf[self.e_s, self.e_a, self.e_g]             # (E, S)
        self.next_focal = _searchsorted_rows(focal_cdf[:, None, :], uni[:, :, 0])

        chunk = max(1, 2_000_000 // max(1, m * kappa * A))
        if self.rule == "uniform":
            # neighbor law averaged over actions: static across sweeps
            pmf_unif = self.pmf.mean(axis=1)                           # (S, G, S)
            cdf_unif = np.cumsum(pmf_unif, axis=2)
            slot_cdf = cdf_unif[self.slot_states, self.slot_gm_rank]   # (E, kappa, S)
            nxt = np.empty((self.n_entries, m, kappa), dtype=np.int64)
            for lo in range(0, self.n_entries, chunk):
                hi = min(lo + chunk, self.n_entries)
                nxt[lo:hi] = _searchsorted_rows(slot_cdf[lo:hi, None, :, :],
                                                uni[lo:hi, :, 1:])
            self.next_g_rank = self._ranks_from_states(nxt)
            self.next_by_action = None
        else:
            # coupled inverse-CDF outcome for each candidate action; advanced
            # indices split by a slice land in front: (E, kappa, A, S)
            slot_cdf = self.cdf[self.slot_states, :, self.slot_gm_rank]
            nba = np.empty((self.n_entries, m, kappa, A), dtype=np.int8)
            for lo in range(0, self.n_entries, chunk):
                hi = min(lo + chunk, self.n_entries)
                nba[lo:hi] = _searchsorted_rows(slot_cdf[lo:hi, None, :, :, :],
                                                uni[lo:hi, :, 1:, None]).astype(np.int8)
            self.next_by_action = nba                                   # (E, m, kappa, A)
            self.next_g_rank = None

    def _ranks_from_states(self, next_states: np.ndarray) -> np.ndarray:
        S = self.env.n_states
        E, m, _ = next_states.shape
        counts = np.empty((E, m, S), dtype=np.int64)
        for x in range(S):
            counts[:, :, x] = (next_states == x).sum(axis=2)
        return self.index.rank_rows(counts.reshape(E * m, S)).reshape(E, m)

    def sweep(self, values: np.ndarray) -> np.ndarray:
        """Continuation vector: mean fiber backup per entry under the frozen
        samples and the current table."""
        m_values = values.max(axis=1)  # (S, G)
        if self.rule == "uniform":
            ranks = self.next_g_rank
        else:
            greedy = np.argmax(values, axis=1)                         # (S, G)
            slot_actions = greedy[self.slot_states, self.slot_gm_rank]  # (E, kappa)
            idx = np.broadcast_to(slot_actions[:, None, :, None],
                                  self.next_by_action.shape[:3] + (1,))
            nxt = np.take_along_axis(self.next_by_action, idx, axis=3)[:, :, :, 0]
            ranks = self._ranks_from_states(nxt.astype(np.int64))
        backups = m_values[self.next_focal, ranks]                     # (E, m)
        return backups.mean(axis=1)

    def reward_vector(self) -> np.ndarray:
        return self.rewards[self.e_s, self.e_a, self.e_g]


def _searchsorted_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF lookup matching searchsorted(..., side="right"): count of
    cdf entries <= u, broadcast over leading axes; the last cdf axis is the
    state axis."""
    out = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(out, cdf.shape[-1] - 1)


# ---------------------------------------------------------------------------
# Value iteration (offline learning)
# ---------------------------------------------------------------------------


def _generic_sweep(env, q: QTable, entries, m, seed, operator, rules, cap):
    """Reference per-entry sweep used for joint mode and exact operators."""
    new_values = np.empty_like(q.values)
    for rank_e, (s, a, h_rank, hist) in enumerate(entries):
        if operator == "exact":
            val = exact_operator(env, q, s, a, hist, enumeration_cap=cap, **rules)
        else:
            rng = stream(seed, "vi-frozen", q.kappa, rank_e)
            val = empirical_operator(env, q, s, a, hist, m, rng, **rules)
        new_values[s, a, h_rank] = val
    return new_values


def _enumerate_entries(q: QTable):
    index = q.index()
    joint_shape = (q.n_states, q.n_actions) if q.mode == "joint" else None
    entries = []
    for s in range(q.n_states):
        for a in range(q.n_actions):
            for h_rank in range(index.total):
                hist = Histogram(tuple(index.unrank_counts(h_rank)), q.kappa,
                                 joint_shape=joint_shape)
                entries.append((s, a, h_rank, hist))
    return entries


def value_iteration(env: Environment, kappa: int, m: int, iterations: int = DEFAULT_ITERATIONS,
                    seed: int = 0, *, mode: str = "marginal", gamma: float | None = None,
                    epsilon: float = DEFAULT_EPSILON,
                    neighbor_action_rule: str = "uniform",
                    aggregate_rule: str = "leave_one_out",
                    operator: str = "empirical",
                    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
                    reward_noise=None) -> QTable:
    """Synchronous value iteration from zero initialization.

    Runs at most ``iterations`` sweeps, recording the residual
    ||Q_{t+1} - Q_t||_inf per sweep, and stops early once the residual drops
    below ``epsilon``. ``operator`` selects the frozen-sample empirical
    operator (default) or the exact expectation (budget-gated).

    ``reward_noise`` is used by the stochastic-reward variant: a callable
    (iteration, engine) -> per-entry reward perturbation vector.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "marginal" and not env.marginal_sufficient:
        raise GmfsError(
            f"environment {env.name!r} does not declare marginal sufficiency; "
            "marginal mode is not valid"
        )
    gamma = env.discount if gamma is None else float(gamma)
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    q = QTable.zeros(mode, kappa, env.n_states, env.n_actions, gamma,
                     env_name=env.name, seed=seed)
    rules = dict(neighbor_action_rule=neighbor_action_rule, aggregate_rule=aggregate_rule)

    fast = mode == "marginal" and operator == "empirical"
    if fast:
        engine = _MarginalEngine(env, kappa, m, seed, **rules)
        rewards = engine.reward_vector()
        shape = q.values.shape
    else:
        entries = _enumerate_entries(q)

    for t in range(iterations):
        if fast:
            cont = engine.sweep(q.values)
            r_t = rewards
            if reward_noise is not None:
                r_t = rewards + reward_noise(t, engine)
            new_flat = r_t + gamma * cont
            new_values = new_flat.reshape(shape)
        else:
            if reward_noise is not None:
                raise GmfsError("stochastic rewards are only wired to the marginal engine")
            new_values = _generic_sweep(env, q, entries, m, seed, operator, rules,
                                        enumeration_cap)
        residual = float(np.abs(new_values - q.values).max())
        q.values = new_values
        q.iterations = t + 1
        q.residual = residual
        q.residual_history.append(residual)
        q.sup_history.append(q.sup_norm())
        if residual < epsilon:
            break
    return q


def value_iteration_stochastic(env: StochasticRewardEnv, kappa: int, m: int,
                               iterations: int = DEFAULT_ITERATIONS, xi: int = 1,
                               seed: int = 0, noise_seed: int | None = None,
                               **kwargs) -> QTable:
    """Offline learning with stochastic rewards.

    Each sweep replaces the deterministic reward with the mean of xi fresh
    draws per entry; the frozen transition samples are shared across the xi
    evaluations, so degenerate noise with xi=1 reproduces the deterministic
    trajectory bit for bit. ``noise_seed`` keys the reward noise separately
    (defaults to ``seed``) for paired-transition comparisons.
    """
    if xi < 1:
        raise ValueError("xi must be >= 1")
    base = env.base
    noise_key = seed if noise_seed is None else noise_seed

    if env.noise == "degenerate" or env.half_width == 0.0:
        noise_fn = None
    else:
        def noise_fn(t, engine):
            rng = stream(noise_key, "reward-noise", kappa, t)
            u = rng.random((engine.n_entries, xi))
            return env.half_width * (2.0 * u - 1.0).mean(axis=1)

    return value_iteration(base, kappa, m, iterations, seed,
                           reward_noise=noise_fn, **kwargs)


# ---------------------------------------------------------------------------
# Off-policy learning (historical data / stochastic approximation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OffPolicyConfig:
    """Learning-rate schedule plus the exploration policy.

    behavior_policy maps (state, marginal rank) to an action pmf; None means
    uniform. It must be strictly positive on every action so the induced
    chain visits all entries.
    """

    learning_rate: float = 0.05
    decay: float = 0.0  # alpha_t = learning_rate / (1 + decay * t)
    trajectory_length: int = 100_000
    behavior_policy: object = None

    def alpha(self, t: int) -> float:
        return self.learning_rate / (1.0 + self.decay * t)

    def action_pmf(self, s: int, g_rank: int, n_actions: int) -> np.ndarray:
        if self.behavior_policy is None:
            return np.full(n_actions, 1.0 / n_actions)
        pmf = np.asarray(self.behavior_policy(s, g_rank), dtype=np.float64)
        if pmf.shape != (n_actions,) or np.any(pmf <= 0.0):
            raise ValueError("behavior policy must be strictly positive on every action")
        return pmf / pmf.sum()

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning rate must lie in (0, 1]")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if self.trajectory_length < 1:
            raise ValueError("trajectory_length must be >= 1")


def off_policy_update(q: QTable, transition, alpha: float) -> float:
    """One tabular update from a logged transition (s, a, h, r, s', g').

    Returns the new entry value; only that entry changes. alpha in (0, 1) per
    the schedule contract; alpha = 1 is tolerated for boundary tests.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    s, a, hist, reward, s_next, g_next = transition
    h_rank = q.index().rank(hist) if isinstance(hist, Histogram) else int(hist)
    backup = reward + q.gamma * fiber_backup(q, s_next, g_next)
    new_value = (1.0 - alpha) * q.values[s, a, h_rank] + alpha * backup
    q.values[s, a, h_rank] = new_value
    return float(new_value)


def off_policy_learn(env: Environment, kappa: int, steps: int | None = None,
                     seed: int = 0, *,
                     gamma: float | None = None, config: OffPolicyConfig | None = None,
                     mode: str = "marginal",
                     neighbor_action_rule: str = "uniform",
                     aggregate_rule: str = "leave_one_out") -> QTable:
    """Q-learning along one surrogate-system trajectory.

    The focal agent explores with the configured behavior policy (uniform by
    default); surrogate neighbors act uniformly, matching the ergodic
    behavior-policy assumption, so the learned table approximates the fixed
    point of the uniform-rule sampled operator.
    """
    if mode != "marginal":
        raise GmfsError("off-policy learning is implemented for marginal mode")
    if neighbor_action_rule != "uniform":
        raise GmfsError("surrogate neighbors explore uniformly in off-policy mode")
    config = config or OffPolicyConfig()
    if steps is None:
        steps = config.trajectory_length
    gamma = env.discount if gamma is None else float(gamma)
    q = QTable.zeros(mode, kappa, env.n_states, env.n_actions, gamma,
                     env_name=env.name, seed=seed)
    S, A = env.n_states, env.n_actions
    index = get_index(S, kappa)
    G = index.total

    hist_counts = np.empty((G, S), dtype=np.int64)
    for g in range(G):
        hist_counts[g] = index.unrank_counts(g)
    hist_probs = hist_counts / kappa
    pmf = np.empty((S, A, G, S))
    rewards = np.empty((S, A, G))
    for s in range(S):
        for a in range(A):
            for g in range(G):
                pmf[s, a, g] = step_distribution(env, s, a, hist_probs[g])
                rewards[s, a, g] = local_reward(env, s, a, hist_probs[g])
    cdf = np.cumsum(pmf, axis=3)
    nb_cdf = np.cumsum(pmf.mean(axis=1), axis=2)  # uniform over actions, (S, G, S)
    gm_rank = np.empty((G, S, S), dtype=np.int64)
    for g in range(G):
        for s in range(S):
            for x in range(S):
                gm = _neighbor_marginal(env, hist_counts[g], s, x, kappa, aggregate_rule)
                gm_rank[g, s, x] = index.rank_rows(gm[None, :])[0]
    slot_states = [np.repeat(np.arange(S), hist_counts[g]) for g in range(G)]

    uniform_behavior = config.behavior_policy is None
    behavior_cdf = None
    if not uniform_behavior:
        behavior_cdf = np.empty((S, G, A))
        for s in range(S):
            for g in range(G):
                behavior_cdf[s, g] = np.cumsum(config.action_pmf(s, g, A))

    rng = stream(seed, "off-policy", kappa)
    s_cur = int(rng.integers(0, S))
    g_cur = int(rng.integers(0, G))
    values = q.values
    block_len = max(1, 4_000_000 // (kappa + 2))  # bound the pre-drawn block
    t = 0
    while t < steps:
        take = min(block_len, steps - t)
        uniforms = rng.random((take, kappa + 2))
        for row_idx in range(take):
            u = uniforms[row_idx]
            if uniform_behavior:
                a = min(int(u[0] * A), A - 1)
            else:
                a = min(int(np.searchsorted(behavior_cdf[s_cur, g_cur], u[0],
                                            side="right")), A - 1)
            r = rewards[s_cur, a, g_cur]
            row = cdf[s_cur, a, g_cur]
            s_next = min(int(np.searchsorted(row, u[1], side="right")), S - 1)
            counts = np.zeros(S, dtype=np.int64)
            for j, x in enumerate(slot_states[g_cur]):
                nb_row = nb_cdf[x, gm_rank[g_cur, s_cur, x]]
                nxt = min(int(np.searchsorted(nb_row, u[2 + j], side="right")), S - 1)
                counts[nxt] += 1
            g_next = int(index.rank_rows(counts[None, :])[0])
            alpha = config.alpha(t + row_idx)
            backup = r + gamma * values[s_next, :, g_next].max()
            values[s_cur, a, g_cur] += alpha * (backup - values[s_cur, a, g_cur])
            s_cur, g_cur = s_next, g_next
        t += take
    q.iterations = steps
    q.residual = float("nan")
    return q


# ---------------------------------------------------------------------------
# Sample budget (how many Monte-Carlo draws per backup the theory asks for)
# ---------------------------------------------------------------------------


def sample_budget(kappa: int, gamma: float, reward_bound: float,
                  n_states: int, n_actions: int) -> int:
    """Theoretical per-entry sample count
    m* = 25 kappa^2 gamma^2 / (1-gamma)^4 * B^2 * ln(200 |S|^2 |A|^2 kappa^{|S||A|}),
    returned as max(1, ceil(m*))."""
    if kappa < 1 or n_states < 1 or n_actions < 1 or reward_bound <= 0:
        raise ValueError("inputs must be positive")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    log_term = (math.log(200.0) + 2.0 * math.log(n_states) + 2.0 * math.log(n_actions)
                + n_states * n_actions * math.log(kappa))
    value = (25.0 * kappa ** 2 * gamma ** 2 / (1.0 - gamma) ** 4
             * reward_bound ** 2 * log_term)
    if not math.isfinite(value):
        raise OverflowError("sample budget overflows floating point range")
    return max(1, math.ceil(value))


# ---------------------------------------------------------------------------
# Q-table file format: little-endian, magic "GMFSQT01", CRC32 trailer
# ---------------------------------------------------------------------------

MAGIC = b"GMFSQT01"
_MODE_CODES = {"joint": 0, "marginal": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def save_qtable(q: QTable, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    name = q.env_name.encode("utf-8")
    buf.write(struct.pack("<BIII", _MODE_CODES[q.mode], q.n_states, q.n_actions, q.kappa))
    buf.write(struct.pack("<ddQ", q.gamma, q.residual, q.seed))
    buf.write(struct.pack("<I", len(name)))
    buf.write(name)
    payload = np.ascontiguousarray(q.values.reshape(-1), dtype="<f8")
    buf.write(payload.tobytes())
    data = buf.getvalue()
    crc = zlib.crc32(data) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(struct.pack("<I", crc))


def load_qtable(path) -> QTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise GmfsError("q-table file is truncated")
    data, crc_bytes = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(data) & 0xFFFFFFFF != stored_crc:
        raise GmfsError("q-table file failed its checksum; the file is corrupt")
    if data[: len(MAGIC)] != MAGIC:
        raise GmfsError(
            f"unrecognized q-table format (expected magic {MAGIC!r}); "
            "enumeration-order version mismatch"
        )
    off = len(MAGIC)
    mode_code, n_states, n_actions, kappa = struct.unpack_from("<BIII", data, off)
    off += struct.calcsize("<BIII")
    gamma, residual, seed = struct.unpack_from("<ddQ", data, off)
    off += struct.calcsize("<ddQ")
    (name_len,) = struct.unpack_from("<I", data, off)
    off += 4
    env_name = data[off : off + name_len].decode("utf-8")
    off += name_len
    if mode_code not in _MODE_NAMES:
        raise GmfsError(f"unknown mode code {mode_code}")
    mode = _MODE_NAMES[mode_code]
    alphabet = n_states * n_actions if mode == "joint" else n_states
    count = num_histograms(alphabet, kappa)
    expected = n_states * n_actions * count * 8
    payload = data[off:]
    if len(payload) != expected:
        raise GmfsError(
            f"q-table payload holds {len(payload) // 8} values but the header "
            f"dims |S|={n_states}, |A|={n_actions}, kappa={kappa} require "
            f"{expected // 8}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(n_states, n_actions, count).copy()
    return QTable(mode, kappa, n_states, n_actions, values, gamma,
                  env_name=env_name, seed=seed, residual=residual)
