import pytest
from hypothesis import HealthCheck, settings

from deltashap.core import SeedTree, synth_dataset
from deltashap.models import CONVEX_SGD, NONCONVEX_SGD, make_config

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def seeds():
    return SeedTree(7)


@pytest.fixture(scope="session")
def blobs():
    return synth_dataset("gaussian-blobs", 20, 200, 3, 2.0, SeedTree(1))


@pytest.fixture(scope="session")
def det_config(blobs):
    return make_config(blobs, lam=0.1)


@pytest.fixture(scope="session")
def sgd_config(blobs):
    return make_config(blobs, CONVEX_SGD, T=40)


@pytest.fixture(scope="session")
def mlp_config(blobs):
    return make_config(blobs, NONCONVEX_SGD, T=40, hidden=4)
