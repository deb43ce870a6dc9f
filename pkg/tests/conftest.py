import pytest

from consistent_cg.synth import Counts, WorldConfig, generate_datasets, generate_world


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig(), seed=0)


@pytest.fixture(scope="session")
def default_data(default_world):
    return generate_datasets(default_world, Counts(), seed=0)
