import numpy as np
import pytest

from maxentmil.basis import Domain, make_basis, make_tensor_grid
from maxentmil.maxent import BasisGrid


@pytest.fixture(scope="session")
def box2d():
    return Domain(lo=[-3.0, -3.0], hi=[3.0, 3.0])


@pytest.fixture(scope="session")
def grid2d(box2d):
    return make_tensor_grid(box2d, 64)


@pytest.fixture(scope="session")
def spec2d():
    return make_basis(2, 8, seed=7)


@pytest.fixture(scope="session")
def engine2d(spec2d, grid2d):
    return BasisGrid(spec2d, grid2d)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
