"""Environment abstraction and the warehouse benchmark.

An environment is a pair of pure functions, a transition kernel
P(s' | s, a, g) and a local reward r(s, a, g), both conditioned on a
neighborhood state marginal g (a pmf over states), plus metadata. Pure
functions rather than tables because g ranges over a continuum; tabulation
against histogram points happens in the learning core.

All functions are stateless; RNG is passed explicitly, so everything here is
safe under arbitrary concurrent use with per-worker streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Environment:
    name: str
    n_states: int
    n_actions: int
    transition: Callable[[int, int, np.ndarray], np.ndarray]
    reward: Callable[[int, int, np.ndarray], float]
    reward_bound: float
    discount: float = 0.95
    lipschitz_p: float | None = None  # None means "unknown"
    marginal_sufficient: bool = False

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("state and action spaces must be non-empty")


def _check_ids(env: Environment, s: int, a: int) -> None:
    if not 0 <= s < env.n_states:
        raise ValueError(f"state id {s} out of range [0, {env.n_states})")
    if not 0 <= a < env.n_actions:
        raise ValueError(f"action id {a} out of range [0, {env.n_actions})")


def _check_marginal(env: Environment, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (env.n_states,):
        raise ValueError(f"marginal shape {g.shape} != ({env.n_states},)")
    if abs(float(g.sum()) - 1.0) > 1e-9 or np.any(g < -1e-12):
        raise ValueError("neighborhood marginal is not a probability vector")
    return g


def step_distribution(env: Environment, s: int, a: int, g) -> np.ndarray:
    """Next-state pmf P(. | s, a, g); validated to sum to 1."""
    g = _check_marginal(env, g)
    _check_ids(env, s, a)
    pmf = np.asarray(env.transition(s, a, g), dtype=np.float64)
    if pmf.shape != (env.n_states,):
        raise ValueError("transition kernel returned a malformed pmf")
    if abs(float(pmf.sum()) - 1.0) > 1e-12 or np.any(pmf < 0):
        raise ValueError(f"transition kernel returned an invalid pmf at (s={s}, a={a})")
    return pmf


def local_reward(env: Environment, s: int, a: int, g) -> float:
    g = _check_marginal(env, g)
    _check_ids(env, s, a)
    return float(env.reward(s, a, g))


def team_reward(env: Environment, states, actions, aggregates) -> float:
    """Arithmetic mean of the agents' local rewards."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    aggregates = np.asarray(aggregates, dtype=np.float64)
    n = len(states)
    if len(actions) != n or aggregates.shape[0] != n:
        raise ValueError("states, actions, and aggregates must share length n")
    total = 0.0
    for i in range(n):
        total += env.reward(int(states[i]), int(actions[i]), aggregates[i])
    return total / n


# ---------------------------------------------------------------------------
# Warehouse benchmark: 3 states (idle, transit, working), actions target the
# intended next state; working transitions degrade with congestion.
# ---------------------------------------------------------------------------

IDLE, TRANSIT, WORKING = 0, 1, 2

WAREHOUSE_DEFAULTS = dict(
    state_values=(10.0, 5.0, 20.0),
    action_costs=(0.0, 0.0, 5.0),
    congestion_sensitivity=5.0,
    min_utility=0.4,
    base_success=0.9,
    min_work_success=0.1,
    congestion_slope=0.8,
    discount=0.95,
)


def warehouse_env(**overrides) -> Environment:
    """The congestion-sensitive warehouse robot environment.

    Working attempts succeed with probability max(0.1, 0.9 - 0.8 * g(2)) and
    fail into transit; idle/transit attempts succeed with probability 0.9 and
    fail in place. Reward is V(s) * max(0.4, 1 - 5 * g(2)) - C(a).
    """
    params = dict(WAREHOUSE_DEFAULTS)
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(f"unknown warehouse parameter(s): {sorted(unknown)}")
    params.update(overrides)
    values = np.asarray(params["state_values"], dtype=np.float64)
    costs = np.asarray(params["action_costs"], dtype=np.float64)
    sens = float(params["congestion_sensitivity"])
    floor = float(params["min_utility"])
    base = float(params["base_success"])
    min_work = float(params["min_work_success"])
    slope = float(params["congestion_slope"])

    def transition(s: int, a: int, g: np.ndarray) -> np.ndarray:
        pmf = np.zeros(3)
        if a == WORKING:
            p = max(min_work, base - slope * g[WORKING])
            pmf[WORKING] += p
            pmf[TRANSIT] += 1.0 - p
        else:
            pmf[a] += base
            pmf[s] += 1.0 - base
        return pmf

    def reward(s: int, a: int, g: np.ndarray) -> float:
        return float(values[s] * max(floor, 1.0 - sens * g[WORKING]) - costs[a])

    bound = float(np.max(values) * 1.0 - np.min(costs))
    return Environment(
        name="warehouse",
        n_states=3,
        n_actions=3,
        transition=transition,
        reward=reward,
        reward_bound=bound,
        discount=float(params["discount"]),
        # the kernel is affine in g(2) with slope 0.8 before clipping and
        # |g(2) - g'(2)| <= 2 TV(g, g'), so TV(P, P') <= 1.6 TV(g, g')
        lipschitz_p=2.0 * slope,
        marginal_sufficient=True,
    )


# ---------------------------------------------------------------------------
# Linear-in-g tabular environments, loadable from plain text. The kernel and
# reward are mixtures of per-congestion-state coefficients:
#     P(. | s, a, g) = sum_x g(x) K[s, a, x, .]      r(s, a, g) = sum_x g(x) R[s, a, x]
# Each K[s, a, x, .] row is a pmf, so mixtures are automatically valid and
# 1-Lipschitz in TV(g, g').
# ---------------------------------------------------------------------------


def linear_env(name: str, kernel: np.ndarray, rewards: np.ndarray,
               discount: float = 0.95, marginal_sufficient: bool = True) -> Environment:
    kernel = np.asarray(kernel, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    ns, na, nx, ns2 = kernel.shape
    if nx != ns or ns2 != ns:
        raise ValueError("kernel must have shape (S, A, S, S)")
    if rewards.shape != (ns, na, ns):
        raise ValueError("rewards must have shape (S, A, S)")
    if np.any(kernel < 0) or not np.allclose(kernel.sum(axis=3), 1.0, atol=1e-12):
        raise ValueError("every kernel coefficient row must be a pmf")

    def transition(s: int, a: int, g: np.ndarray) -> np.ndarray:
        return g @ kernel[s, a]

    def reward(s: int, a: int, g: np.ndarray) -> float:
        return float(g @ rewards[s, a])

    return Environment(
        name=name,
        n_states=ns,
        n_actions=na,
        transition=transition,
        reward=reward,
        reward_bound=float(np.max(np.abs(rewards))),
        discount=discount,
        lipschitz_p=1.0,
        marginal_sufficient=marginal_sufficient,
    )


def load_tabular_env(text: str, name: str = "custom") -> Environment:
    """Parse a plain-text linear-in-g environment.

    Format (one entry per line, '#' comments allowed):

        states 2
        actions 2
        discount 0.9
        kernel S A X : p0 p1 ...
        reward S A X : value
    """
    ns = na = None
    discount = 0.95
    kernel_rows: dict = {}
    reward_rows: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "states":
                ns = int(parts[1])
            elif parts[0] == "actions":
                na = int(parts[1])
            elif parts[0] == "discount":
                discount = float(parts[1])
            elif parts[0] in ("kernel", "reward"):
                s, a, x = int(parts[1]), int(parts[2]), int(parts[3])
                if parts[4] != ":":
                    raise ValueError("missing ':'")
                vals = [float(v) for v in parts[5:]]
                target = kernel_rows if parts[0] == "kernel" else reward_rows
                target[(s, a, x)] = vals
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"environment spec line {lineno}: {exc}") from exc
    if ns is None or na is None:
        raise ConfigError("environment spec must declare states and actions")
    kernel = np.zeros((ns, na, ns, ns))
    rewards = np.zeros((ns, na, ns))
    for s in range(ns):
        for a in range(na):
            for x in range(ns):
                if (s, a, x) not in kernel_rows:
                    raise ConfigError(f"missing kernel row for (s={s}, a={a}, x={x})")
                row = kernel_rows[(s, a, x)]
                if len(row) != ns:
                    raise ConfigError(f"kernel row (s={s}, a={a}, x={x}) must list {ns} probabilities")
                kernel[s, a, x] = row
                rw = reward_rows.get((s, a, x), [0.0])
                if len(rw) != 1:
                    raise ConfigError(f"reward row (s={s}, a={a}, x={x}) must list one value")
                rewards[s, a, x] = rw[0]
    return linear_env(name, kernel, rewards, discount=discount)


# ---------------------------------------------------------------------------
# Stochastic reward wrapper: the mean stays the base reward, draws stay inside
# declared support bounds.
# ---------------------------------------------------------------------------

NOISE_FAMILIES = ("degenerate", "uniform")


@dataclass(frozen=True)
class StochasticRewardEnv:
    base: Environment
    noise: str = "degenerate"
    half_width: float = 0.0
    averaging: int = 1

    def __post_init__(self):
        if self.noise not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.noise!r}")
        if self.noise == "uniform" and self.half_width < 0:
            raise ValueError("half_width must be >= 0")
        if self.averaging < 1:
            raise ValueError("averaging parameter must be >= 1")

    @property
    def support_low(self) -> float:
        return -self.base.reward_bound - (self.half_width if self.noise == "uniform" else 0.0)

    @property
    def support_high(self) -> float:
        return self.base.reward_bound + (self.half_width if self.noise == "uniform" else 0.0)


def sample_reward(env: StochasticRewardEnv, s: int, a: int, g, rng: np.random.Generator) -> float:
    """One draw from the reward distribution at (s, a, g); mean-unbiased."""
    mean = local_reward(env.base, s, a, g)
    if env.noise == "degenerate" or env.half_width == 0.0:
        return mean
    return mean + env.half_width * (2.0 * rng.random() - 1.0)


def make_env(name: str, **overrides) -> Environment:
    if name == "warehouse":
        return warehouse_env(**overrides)
    raise ConfigError(f"unknown environment {name!r}")
