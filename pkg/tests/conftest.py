import numpy as np
import pytest

from ifrvis import tensor as T


def max_grad_error(f, params, h=1e-5, floor=1e-6, max_entries=None, seed=0):
    """Largest relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    T.backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.reshape(-1)
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, max_entries, replace=False)
        num = T.numerical_gradient(f, p, idx, h=h)
        for i, g in num.items():
            worst = max(worst, T.relative_error(float(analytic.reshape(-1)[i]), g, floor))
    return worst


@pytest.fixture
def gradcheck():
    return max_grad_error


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Append ``(criterion, passed, detail)``; lines are echoed now and repeated in the summary."""

    def log(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
