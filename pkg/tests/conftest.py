import numpy as np
import pytest

from nawt.model import Dataset
from nawt.numerics import RngStream
from nawt.simulation import generate_main

ACCEPTANCE_LINES = []


def irls_logistic(x, t, tol=1e-14, max_iter=100):
    """Textbook IRLS for the logistic MLE; independent of the package solver."""
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        z = eta + (t - p) / w
        new = np.linalg.solve(x.T @ (w[:, None] * x), x.T @ (w * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def random_logit_data(seed, n=200, k=4):
    g = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), g.standard_normal((n, k - 1))])
    beta = g.normal(0, 0.7, k)
    t = (g.random(n) < 1 / (1 + np.exp(-x @ beta))).astype(float)
    y = x @ g.normal(0, 1, k) + 2.0 * t + g.standard_normal(n)
    return Dataset(x, t, y)


@pytest.fixture(scope="session")
def scen_a():
    ds, _ = generate_main("a", 1000, RngStream(20240501, 0))
    return ds


@pytest.fixture(scope="session")
def scen_b():
    ds, _ = generate_main("b", 1000, RngStream(20240502, 0))
    return ds


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
