import numpy as np
import pytest

from dualguard import systems
from dualguard.synthesis import ControllerParams, plant_coprime, solve_kalman


@pytest.fixture(scope="session")
def uav():
    return systems.UAV


@pytest.fixture(scope="session")
def rlc():
    return systems.RLC


@pytest.fixture(scope="session")
def uav_kalman():
    return solve_kalman(systems.UAV, systems.uav_noise(), include_control_noise=True)


@pytest.fixture(scope="session")
def uav_params(uav_kalman):
    return ControllerParams(systems.uav_lqr_gain(), uav_kalman.L)


@pytest.fixture(scope="session")
def uav_factors(uav_params):
    return plant_coprime(systems.UAV, uav_params)


def random_stable(rng, n, m, p, radius=0.9):
    """Random (A, B, C) with spectral radius ``radius`` and D = 0."""
    A = rng.standard_normal((n, n))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    return A, rng.standard_normal((n, m)), rng.standard_normal((p, n))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
