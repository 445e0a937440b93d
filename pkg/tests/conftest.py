import numpy as np
import pytest


def central_diff(f, x, step=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def zca(sigma):
    """Symmetric inverse square root ``U D^{-1/2} U^T`` by eigendecomposition."""
    vals, vecs = np.linalg.eigh(sigma)
    return (vecs / np.sqrt(vals)) @ vecs.T


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def random_spd(rng, d, cond=None):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if cond is None:
        vals = rng.uniform(0.3, 3.0, d)
    else:
        vals = np.geomspace(1.0, cond, d)
        rng.shuffle(vals)
    return (q * vals) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def acceptance_line(number, name, passed, detail=""):
    """Record one criterion outcome; printed in the terminal summary."""
    ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}" + (
        f" ({detail})" if detail else "")
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
