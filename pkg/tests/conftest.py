import numpy as np
import pytest

from omnifuse.engine import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(99)
