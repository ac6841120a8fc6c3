import numpy as np
import pytest

from cplab import cpsim as cs
from cplab.experiments import train_default_detector


@pytest.fixture(scope="session")
def trained_detector():
    """The default desk-scale detector (200 scenes, 4 agents, 30 epochs)."""
    return train_default_detector()


@pytest.fixture(scope="session")
def random_detector():
    return cs.DetectorModel.init(cs.DetectorConfig(), seed=0).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
