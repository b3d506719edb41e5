import numpy as np
import pytest

# verdict lines from test_acceptance, echoed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_columns(rng, d, n, offset=0.0):
    x = rng.standard_normal((d, n)) + offset
    return x / np.linalg.norm(x, axis=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
