import numpy as np
import pytest

from refcolor.engine import precision


@pytest.fixture(autouse=True)
def float64():
    """Oracle comparisons are only meaningful at 64-bit."""
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
