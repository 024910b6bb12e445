import numpy as np
import pytest
from hypothesis import settings

from gpcover.environment import discretize
from gpcover.gp import RBF, KernelSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

SQUARE = [(0, 0), (10, 0), (10, 10), (0, 10)]
BLOCK = [(4, 4), (6, 4), (6, 6), (4, 6)]


@pytest.fixture
def square_env():
    return discretize(SQUARE, [], 1.0, 1.0)


@pytest.fixture
def blocked_env():
    return discretize([(0, 0), (20, 0), (20, 12), (0, 12)], [[(8, 0), (12, 0), (12, 9), (8, 9)]], 1.0, 2.0)


@pytest.fixture
def rbf():
    return KernelSpec(RBF, 1.0, lengthscale=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
