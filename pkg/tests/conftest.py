import numpy as np
import pytest

from pfctc.numerics import tempered_softmax_rows

# (criterion, passed, detail) tuples appended by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def random_instance(rng, max_T=6, max_U=3, max_V=4, feasible=True):
    """Random (probs, labels) pair; probs from a random-temperature softmax."""
    while True:
        T = int(rng.integers(1, max_T + 1))
        V = int(rng.integers(2, max_V + 1))
        U = int(rng.integers(0, max_U + 1))
        labels = [int(k) for k in rng.integers(1, V, size=U)]
        repeats = sum(a == b for a, b in zip(labels, labels[1:]))
        if feasible and T < U + repeats:
            continue
        tau = float(rng.uniform(0.5, 2.0))
        probs = tempered_softmax_rows(rng.normal(scale=2.0, size=(T, V)), tau)
        return probs, labels


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
