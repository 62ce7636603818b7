import numpy as np
import pytest
from scipy.linalg import hadamard


def random_spd(rng, d, spread=1.0):
    a = rng.standard_normal((d, d))
    q, _ = np.linalg.qr(a)
    lam = np.exp(spread * rng.standard_normal(d))
    return (q * lam) @ q.T


def hadamard_probes(d):
    """Rows of a Hadamard matrix restricted to d coordinates: sum_p z z^T = P * I exactly."""
    n = 1
    while n < d:
        n *= 2
    return hadamard(n)[:d].astype(float)


def central_difference(f, x, rel_step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
