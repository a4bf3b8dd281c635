import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stfl.data import load_cancer
from stfl.paillier import RandomSource, keygen

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def keypair512():
    return keygen(512, RandomSource("tests-512"))


@pytest.fixture(scope="session")
def keypair1024():
    return keygen(1024, RandomSource("tests-1024"))


@pytest.fixture(scope="session")
def cancer():
    return load_cancer()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
