import numpy as np
import pytest

from pseudolabel.geometry import BBox

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_box(rng, size=100.0, min_side=1.0, integer=False, **kw):
    """Random valid box inside a size x size frame."""
    while True:
        x = np.sort(rng.uniform(0, size, 2))
        y = np.sort(rng.uniform(0, size, 2))
        if integer:
            x = np.array([np.floor(x[0]), np.ceil(x[1])])
            y = np.array([np.floor(y[0]), np.ceil(y[1])])
        if x[1] - x[0] >= min_side and y[1] - y[0] >= min_side:
            return BBox(float(x[0]), float(y[0]), float(x[1]), float(y[1]), **kw)
