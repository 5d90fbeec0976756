import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from distillvol import data as D

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_case():
    return D.generate_synthetic_case(7, (16, 16, 16))
