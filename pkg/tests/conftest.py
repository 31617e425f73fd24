import numpy as np
import pytest

from gchoreo.body_model import Camera, load_skeleton
from gchoreo.checks import toy_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return load_skeleton()


@pytest.fixture(scope="session")
def tiny_skeleton():
    return toy_skeleton(seed=0)


@pytest.fixture(scope="session")
def camera():
    return Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
