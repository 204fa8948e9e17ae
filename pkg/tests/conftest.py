import numpy as np
import pytest

from sfmnet.synth import generate_scene, standard_suite


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def suite():
    return standard_suite()


@pytest.fixture(scope="session")
def scenes(suite):
    return {name: generate_scene(spec, name=name) for name, spec in suite.items()}
