import numpy as np
import pytest

from merpo.mdp import StochasticPolicy, TabularMdp
from merpo.tasks import TaskFamily, collect_dataset, make_behavior_policy, random_mdp, sample_tasks


def rand_mdp(seed: int, S: int = 5, A: int = 2, gamma: float = 0.9, branching=None) -> TabularMdp:
    return random_mdp(np.random.default_rng(seed), S, A, gamma, branching)


def rand_policy(seed: int, S: int, A: int, scale: float = 1.0) -> StochasticPolicy:
    return StochasticPolicy(np.random.default_rng(seed).normal(size=(S, A)) * scale)


def single_state(r: float = 1.0, gamma: float = 0.5) -> TabularMdp:
    return TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), r), np.ones(1), gamma)


@pytest.fixture(scope="session")
def grid_task():
    fam = TaskFamily("gridworld_wind", 4, (-0.3, 0.3), 1, 0.9, 0.1)
    return sample_tasks(fam, 1)[0]


@pytest.fixture(scope="session")
def grid_data(grid_task):
    beta = make_behavior_policy(grid_task, "medium")
    return collect_dataset(grid_task, beta, 1500, seed=0, task_id=0, quality="medium")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
