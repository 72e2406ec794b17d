import numpy as np
import pytest

from eqlatent import generator


@pytest.fixture(scope="session")
def small_corpus():
    return generator.generate_corpus(120, generator.GenConfig(seed=1))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
