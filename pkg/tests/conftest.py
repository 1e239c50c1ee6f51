import numpy as np
import pytest

from psgkit.scene import CorpusConfig, generate_corpus


@pytest.fixture(scope="session")
def toy_cfg():
    return CorpusConfig(num_scenes=12, height=8, width=8, channels=8, max_objects=4,
                        num_object_classes=4, num_predicates=4, seed=11)


@pytest.fixture(scope="session")
def toy_corpus(toy_cfg):
    return generate_corpus(toy_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
