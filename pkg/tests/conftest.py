import numpy as np
import pytest

from convexdp import (AffineDynamics, BoxActionSet, ControlProblem,
                      FiniteDisturbance, QuadraticActionCost, StagedDomain,
                      build_staged_grid)


def make_1d_instance(spacing=0.1):
    """Small scalar linear-convex instance: K=3, N=2, L1 + quadratic cost."""
    K = 3
    t = np.arange(K + 1, dtype=float)
    dom = StagedDomain(1, (-1.0 - 0.3 * t).reshape(-1, 1),
                       (1.0 + 0.3 * t).reshape(-1, 1))
    grid = build_staged_grid(dom, [spacing])
    prob = ControlProblem(
        n=1, m=1, horizon=K,
        dynamics=AffineDynamics(np.array([[0.9]]), np.array([[0.5]]),
                                np.array([[1.0]])),
        stage_cost=QuadraticActionCost(
            lambda X: np.abs(X[:, 0]), np.array([[1.0]])),
        terminal_cost=lambda X: X[:, 0] ** 2,
        action_set=BoxActionSet(np.array([-0.2]), np.array([0.2])),
        disturbance=FiniteDisturbance(np.array([[-0.05], [0.08]]),
                                      np.array([0.55, 0.45])),
        name="toy_1d",
    )
    return prob, grid


@pytest.fixture(scope="session")
def instance_1d():
    return make_1d_instance(0.1)


@pytest.fixture(scope="session")
def grid_2d_pair():
    """Two-stage 2-D staged grid, spacing 0.1."""
    dom = StagedDomain(2, np.array([[-1.0, -1.0], [-1.2, -1.2]]),
                       np.array([[1.0, 1.0], [1.2, 1.2]]))
    return build_staged_grid(dom, [0.1, 0.1])
