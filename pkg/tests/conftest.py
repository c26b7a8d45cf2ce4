import numpy as np
import pytest

from hyperdiff.skeleton import default_skeleton


@pytest.fixture
def skeleton():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
