import numpy as np
import pytest

from drvar.estimation import fit_drvar
from drvar.montecarlo import DGPConfig, generate_dgp


def random_orthonormal(rng, n, r):
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q


def random_pd(rng, n, floor=0.1):
    m = rng.standard_normal((n, n))
    return m @ m.T / n + floor * np.eye(n)


def random_stable_alphas(rng, r, p, radius=0.8):
    """Coefficient blocks rescaled so the companion radius is ``radius``."""
    from drvar.estimation import companion_radius

    alphas = [rng.standard_normal((r, r)) / r for _ in range(p)]
    rad = companion_radius(alphas)
    s = radius / rad
    return [a * s ** (j + 1) for j, a in enumerate(alphas)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def dgp_small():
    """n=20, r=3 artificial design with T=400."""
    return generate_dgp(DGPConfig(n=20, r=3, T=400, seed=3))


@pytest.fixture(scope="session")
def fitted_small(dgp_small):
    panel, _ = dgp_small
    return fit_drvar(panel, 3, 2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
