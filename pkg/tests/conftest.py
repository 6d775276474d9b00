import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treelink.linkage import LinkagePriors, RecordFile, prepare_data
from treelink.simgen import SimConfig, generate_dataset
from treelink.spatial import Domain

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    """A 45 m window simulated once per session (about 120 records per file)."""
    return generate_dataset(SimConfig(domain_side=60, window_side=45, seed=7))


def make_files(loc1, loc2, v1=None, v2=None, years=(2015, 2019)):
    loc1, loc2 = np.asarray(loc1, float).reshape(-1, 2), np.asarray(loc2, float).reshape(-1, 2)
    v1 = np.ones(len(loc1)) if v1 is None else v1
    v2 = np.ones(len(loc2)) if v2 is None else v2
    return (RecordFile(1, years[0], loc1, v1, np.arange(1, len(loc1) + 1)),
            RecordFile(2, years[1], loc2, v2, np.arange(1, len(loc2) + 1)))


def make_data(loc1, loc2, domain=Domain(0, 0, 10, 10), **prior_kw):
    priors = LinkagePriors(**prior_kw)
    return prepare_data(make_files(loc1, loc2), domain, priors), priors
