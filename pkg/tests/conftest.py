import numpy as np
import pytest

from ergosmp import ControlLaw, ModelSpec, TimeGrid, simulate_state


@pytest.fixture(scope="session")
def lq1():
    return ModelSpec.lq1()


@pytest.fixture(scope="session")
def cubic1():
    return ModelSpec.cubic1()


@pytest.fixture(scope="session")
def riccati_p():
    """Stationary Riccati solution for the scalar benchmark, from an
    independent solver: optimal feedback u = -P x, optimal cost sigma^2 P."""
    from scipy.linalg import solve_continuous_are

    P = solve_continuous_are(np.array([[-1.0]]), np.array([[1.0]]),
                             np.array([[1.0]]), np.array([[1.0]]))
    return float(P[0, 0])


@pytest.fixture(scope="session")
def lq1_base8(lq1):
    """Shared LQ1 ensemble under u = 0 from x0 = 1 on [0, 8]."""
    grid = TimeGrid(dt=0.01, steps=800)
    return simulate_state(lq1, lq1.zero_control(), [1.0], grid, 4096, seed=5)


@pytest.fixture(scope="session")
def lq1_zero(lq1):
    return lq1.zero_control()


@pytest.fixture(scope="session")
def lq1_one(lq1):
    return ControlLaw.constant([1.0], lq1.control_set)
