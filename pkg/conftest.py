import numpy as np
import pytest

from demaformer.config import config_from_dict
from demaformer.data import gen_synthetic
from demaformer.gradcheck import tiny_model_config, tiny_sample
from demaformer.model import DemaFormer

SMALL_CONFIG = {
    "model": {"d": 8, "d_k": 5, "n_e": 1, "n_d": 1, "d_v": 4, "d_q": 4, "d_a": 4},
    "synth": {"l_v": 8, "l_q": 3, "d_v": 4, "d_q": 4, "d_a": 4, "snr": 5.0, "seed": 11},
    "ebm": {"k": 5},
    "epochs": 2,
    "batch_size": 2,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return DemaFormer(tiny_model_config(), np.random.default_rng(7))


@pytest.fixture
def sample():
    return tiny_sample(3)


@pytest.fixture
def small_raw():
    """Tiny run config as plain JSON: 4-dim features, d=8, 1+1 layers, short Langevin chains."""
    return {key: dict(value) if isinstance(value, dict) else value for key, value in SMALL_CONFIG.items()}


@pytest.fixture
def small_cfg(small_raw):
    return config_from_dict(small_raw)


@pytest.fixture
def small_samples(small_cfg):
    return gen_synthetic(small_cfg.synth, 6)
