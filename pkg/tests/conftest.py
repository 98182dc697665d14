import numpy as np
import pytest

from siamzero import evalsuite as ev
from siamzero import toygen
from siamzero.siamese import ArchitectureSpec, build_model


@pytest.fixture(scope="session")
def spec():
    return ArchitectureSpec()


@pytest.fixture(scope="session")
def fresh_params(spec):
    return build_model(spec, 0)


@pytest.fixture(scope="session")
def toy6():
    """Six toy classes with eight samples each, preprocessed."""
    toy = toygen.make_toy(6, 8, seed=3)
    data, templates = ev.from_images(toy.templates, toy.samples, toy.labels)
    return data, templates


@pytest.fixture(scope="session")
def trained_small(spec, toy6):
    """A checkpoint after a few epochs on four seen toy classes."""
    data, templates = toy6
    cfg = ev.TrainConfig(batch_size=16, max_epochs=3, n=2, seed=5)
    exp = ev.run_experiment(data, templates, spec, cfg, c_seen=4)
    return exp.result.params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
