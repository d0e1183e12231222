import numpy as np
import pytest
from scipy.special import roots_legendre

from pathclosure.polymoment import GaussianMoments, Polynomial


def random_poly(rng, n, degree, terms):
    out = {}
    for _ in range(terms):
        d = int(rng.integers(0, degree + 1))
        e = [0] * n
        for _ in range(d):
            e[int(rng.integers(n))] += 1
        out[tuple(e)] = out.get(tuple(e), 0.0) + float(rng.normal())
    return Polynomial(n, out)


def random_gaussian(rng, n, scale=1.0):
    B = rng.normal(size=(n, n))
    cov = scale * (B @ B.T / n + 0.3 * np.eye(n))
    return GaussianMoments(rng.normal(size=n), cov)


def quadrature_expectation(p, g, points=160):
    """Tensor Gauss-Legendre over the box mean +- 10 sigma (n <= 2)."""
    n = g.dim
    sig = np.sqrt(np.diag(g.covariance))
    nodes, weights = roots_legendre(points)
    axes = [g.mean[i] + 10 * sig[i] * nodes for i in range(n)]
    w1 = [10 * sig[i] * weights for i in range(n)]
    grids = np.meshgrid(*axes, indexing="ij")
    x = np.stack(grids, axis=-1)
    W = w1[0] if n == 1 else np.outer(w1[0], w1[1])
    P = np.linalg.inv(g.covariance)
    d = x - g.mean
    dens = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, P, d))
    dens /= np.sqrt((2 * np.pi) ** n * np.linalg.det(g.covariance))
    return float(np.sum(W * dens * p(x)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; the lines are repeated in the terminal summary."""

    def report(label, title, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
