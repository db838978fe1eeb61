import numpy as np
import pytest
from hypothesis import settings

from weakflow.grid import make_grid

settings.register_profile("weakflow", max_examples=40, deadline=None)
settings.load_profile("weakflow")


@pytest.fixture(scope="session")
def grid():
    return make_grid(-20.0, 20.0, 1024)


@pytest.fixture
def bulk(grid):
    return np.abs(grid.x) < 4.0


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
