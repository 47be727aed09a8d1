import numpy as np
import pytest

from ccbcep import baselines
from ccbcep.network import builtin_instance

# acceptance lines collected by test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def hearn():
    return builtin_instance("hearn")


@pytest.fixture(scope="session")
def sioux_falls():
    return builtin_instance("sioux_falls")


@pytest.fixture(scope="session")
def hearn_refs(hearn):
    net, dem = hearn
    return baselines.compute_references(net, dem, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
