import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def exp_corr(a, b, decay):
    """Independent exponential-correlation oracle (explicit loops)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = np.exp(-decay * np.sqrt(np.sum((a[i] - b[j]) ** 2)))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
