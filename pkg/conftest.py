import numpy as np
import pytest

import predictor as pr
import transform as tf
from schedule import build_linear_schedule
from utils.rng import Substream

GRID = (8, 8, 1)


@pytest.fixture
def grid():
    return GRID


@pytest.fixture
def sched():
    return build_linear_schedule(1000, 1e-4, 0.02, 50)


@pytest.fixture
def short_sched():
    return build_linear_schedule(100, 1e-3, 0.02, 10)


@pytest.fixture
def sym_mixture():
    """Corner blob closed under quarter-turns: four rotated means."""
    blob = pr.GaussianMixture(weights=[1.0], means=pr.mean_pattern("corner-blob", GRID)[None], sigmas=[0.5])
    return pr.symmetrize(blob, [tf.rotation(1)])


@pytest.fixture
def perturbed(sym_mixture):
    return pr.PredictorConfig(mixture=sym_mixture, gamma=0.05)


@pytest.fixture
def latent():
    def draw(seed=0, shape=GRID):
        return Substream(seed, "test-latent").normal(int(np.prod(shape))).reshape(shape)
    return draw


@pytest.fixture
def write_config(tmp_path):
    def write(text, name="config.yaml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write
