import numpy as np
import pytest

from camoe.datagen import GeneratorConfig, generate
from camoe.model import ModelConfig

SMALL_MODEL = ModelConfig(embed_dim=6, expert_dim=5, rank=2, deep_layers=(4,), branches=2,
                          tower_layers=(3,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return generate(GeneratorConfig(n=3000, seed=3))
