import numpy as np
import pytest

from sprisk import Asset, FactorModel, Portfolio, Quadrature

PAPER_EXPOSURES = [9, 8, 18, 9, 8, 20, 17, 16, 12, 12]


@pytest.fixture(scope="session")
def quad():
    return Quadrature.gauss_hermite(99)


@pytest.fixture(scope="session")
def quad_fine():
    return Quadrature.gauss_hermite(399)


@pytest.fixture(scope="session")
def indep():
    return FactorModel("independent")


@pytest.fixture(scope="session")
def gauss():
    return FactorModel("gaussian")


@pytest.fixture(scope="session")
def ten_asset():
    """The small inhomogeneous test book: exposures 9,8,18,9,8,20,17,16,12,12
    with pd 10% each."""
    return Portfolio([Asset(f"a{i}", e, 0.1) for i, e in enumerate(PAPER_EXPOSURES)])


def make_fifty_asset(beta: float) -> Portfolio:
    """Correlated test book: exposures cycle 1..5 with pds linear in
    [0.002, 0.03], plus two larger positions at low pd."""
    assets = [
        Asset(f"c{i:02d}", 1 + (i % 5), 0.002 + 0.028 * (i / 47), beta)
        for i in range(48)
    ]
    assets.append(Asset("big1", 8, 0.003, beta))
    assets.append(Asset("big2", 10, 0.002, beta))
    return Portfolio(assets)


@pytest.fixture(scope="session")
def fifty_asset():
    return make_fifty_asset(0.5)


def make_homogeneous(n: int, pd: float, beta: float) -> Portfolio:
    return Portfolio([Asset(f"h{i}", 1.0, pd, beta) for i in range(n)])


@pytest.fixture(scope="session")
def hundred_homog():
    return make_homogeneous(100, 0.01, 0.5)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260811)
