import numpy as np
import pytest

from nnwm.fixtures import vgg16_style, vgg_tiny


@pytest.fixture
def tiny_model():
    return vgg_tiny(0)


@pytest.fixture(scope="session")
def deep_model():
    return vgg16_style(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
