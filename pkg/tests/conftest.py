import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def table1():
    from emtcycle.presets import table1_datasets
    return table1_datasets()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
