import numpy as np
import pytest

from cdsampling.targets import GaussianMixtureTarget


def central_diff(f, x, h=1e-5):
    """Gradient of a batched scalar function by central differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = h
        g[..., i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gaussian(dim=1, std=1.0):
    return GaussianMixtureTarget(np.zeros((1, dim)), covariances=np.full((1, dim), std**2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bimodal_1d():
    return GaussianMixtureTarget([[-2.0], [3.0]], covariances=[[0.5], [1.0]], weights=[0.4, 0.6])


ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
