import os

import numpy as np
import pytest

from landau.models import Activation, NetworkSpec
from landau.services.benchmarks import make_case, sample_initial

RUN_SLOW = os.getenv("LANDAU_RUN_SLOW", "0") == "1"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return NetworkSpec(input_dim=3, output_dim=2, vel_embed=(4, 1), time_embed=(3, 1), trunk=(5, 2))


@pytest.fixture
def linear_spec():
    return NetworkSpec(
        input_dim=3, output_dim=2, vel_embed=(3, 1), time_embed=(2, 1), trunk=(4, 1),
        activation=Activation.IDENTITY,
    )


@pytest.fixture
def bkw2d():
    return make_case("BKW2D")


@pytest.fixture
def small_cloud(bkw2d):
    return sample_initial(bkw2d, 24, seed=7)
