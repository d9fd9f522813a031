import numpy as np
import pytest

from helivortex.domain import DomainSpec, build_domain
from helivortex.groundstate import ProblemState, solve_ground_state

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def disk_coarse():
    return build_domain(DomainSpec.disk((2.0, 0.0), 1.0, 0.05))


@pytest.fixture(scope="session")
def disk_medium():
    return build_domain(DomainSpec.disk((2.0, 0.0), 1.0, 0.02))


@pytest.fixture(scope="session")
def small_solution(disk_coarse):
    """Converged ground state on the h=0.05 canonical disk at eps=0.1."""
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    return solve_ground_state(state)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
