import numpy as np
import pytest

from modality_lens.alignment import make_triplets
from modality_lens.gradcheck import tiny_config
from modality_lens.pointcloud import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config(["synth.train_per_category=2"])


@pytest.fixture(scope="session")
def tiny_triplets(tiny_cfg):
    samples = synth_generate(tiny_cfg.synth.spec(tiny_cfg.seed, "train"))
    return make_triplets(samples, tiny_cfg.category_names(), tiny_cfg.seed)
