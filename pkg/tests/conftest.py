import numpy as np
import pytest

from widthlab.data import synthetic_task

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def task():
    return synthetic_task(8, 64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
