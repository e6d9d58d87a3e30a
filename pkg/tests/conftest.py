import numpy as np
import pytest

_ACCEPTANCE = []


def numerical_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of x (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
