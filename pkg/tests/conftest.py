import numpy as np
import pytest

from tailtreat.dataset import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def location_shift(n, shift=2.0, seed=0, p=0):
    """Exogenous D, Y = shift * D + eps, instrument equal to D."""
    g = np.random.default_rng(seed)
    d = g.integers(0, 2, n)
    x = g.uniform(size=(n, p))
    y = shift * d + g.standard_normal(n)
    return Dataset(y, d, d, x)


@pytest.fixture
def shift_data():
    return location_shift(3000, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
