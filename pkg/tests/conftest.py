import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metareg.datagen import CaseSpec, SimulationConfig, sample_dataset

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(case=1, n=20, k=1, seed=0, periods=5):
    cfg = SimulationConfig(CaseSpec.from_id(case), n=n, k=k, periods=periods, allow_custom=True)
    return sample_dataset(cfg, np.random.default_rng(seed))


@pytest.fixture
def small_dataset():
    return make_dataset()
