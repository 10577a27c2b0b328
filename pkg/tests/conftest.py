import numpy as np
import pytest

from propulsion_lab import tensor as T


def rel_err(a, b):
    """Norm-wise relative error, guarded against two zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build_loss, params, h=1e-6):
    """Largest relative error between backward() and central differences over ``params``."""
    for p in params:
        p.grad = None
    T.backward(build_loss(), params)
    worst = 0.0
    for p in params:
        numeric = T.finite_diff_grad(build_loss, p, h)
        worst = max(worst, rel_err(p.grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
