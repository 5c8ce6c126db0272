import numpy as np
import pytest

from gmfs.diagnostics import action_blind_env, small_env
from gmfs.env import warehouse_env


@pytest.fixture(scope="session")
def warehouse():
    return warehouse_env()


@pytest.fixture(scope="session")
def small():
    """2-state 2-action linear-in-g env, gamma 0.9, brute-force enumerable."""
    return small_env(gamma=0.9)


@pytest.fixture(scope="session")
def action_blind():
    """Marginal-sufficient env whose kernel ignores the agent's own action."""
    return action_blind_env(gamma=0.9)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
