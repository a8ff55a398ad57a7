import numpy as np
import pytest

from pqr.soft_mdp import TabularMdp, random_tabular_mdp, solve_soft


@pytest.fixture(scope="session")
def mdp2x2():
    # two states, two actions, uniform transitions, anchored reward column
    return TabularMdp(
        transition=np.full((2, 2, 2), 0.5),
        reward=np.array([[0.0, 1.0], [0.0, 0.5]]),
        gamma=0.5,
        alpha=1.0,
        anchor_action=0,
    )


@pytest.fixture(scope="session")
def sol2x2(mdp2x2):
    return solve_soft(mdp2x2, tol=1e-12)


@pytest.fixture(scope="session")
def mdp43():
    # action-dependent Dirichlet transition rows; anchor column is zero
    return random_tabular_mdp(4, 3, seed=11, gamma=0.9, alpha=1.0)


@pytest.fixture(scope="session")
def sol43(mdp43):
    return solve_soft(mdp43, tol=1e-12)
