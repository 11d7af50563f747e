import numpy as np
import pytest

from relnet.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def naive_matmul(x, W):
    out = np.zeros((x.shape[0], W.shape[1]))
    for i in range(x.shape[0]):
        for j in range(W.shape[1]):
            s = 0.0
            for k in range(x.shape[1]):
                s += x[i, k] * W[k, j]
            out[i, j] = s
    return out


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
