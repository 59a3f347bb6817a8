import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssdiff.process import DiffusionProcess
from ssdiff.schedules import linear_beta_schedule, make_resolution_schedule, single_level_schedule

settings.register_profile("ssd", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=40)
settings.load_profile("ssd")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ns1000():
    return linear_beta_schedule(1000)


@pytest.fixture(scope="session")
def three_level():
    """1x8x8 process over levels 2, 4, 8 with T=100."""
    ns = linear_beta_schedule(100)
    return DiffusionProcess(ns, make_resolution_schedule("equal", 1.0, [2, 4, 8], 100), 1)


@pytest.fixture(scope="session")
def two_level():
    """1x8x8 process with a single 8 -> 4 transition, T=50."""
    ns = linear_beta_schedule(50)
    return DiffusionProcess(ns, make_resolution_schedule("equal", 1.0, [4, 8], 50), 1)


@pytest.fixture(scope="session")
def single_level():
    ns = linear_beta_schedule(1000)
    return DiffusionProcess(ns, single_level_schedule(4, 1000), 1)
