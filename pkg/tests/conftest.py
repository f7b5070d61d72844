import numpy as np
import pytest

from swarmpipe.model import ModelConfig


@pytest.fixture(scope="session")
def default_config() -> ModelConfig:
    return ModelConfig(seed=1)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(n_blocks=2, hidden_dim=8, n_heads=2, vocab_size=16,
                       max_seq_len=64, seed=3)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
