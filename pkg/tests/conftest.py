import numpy as np
import pytest
import torch

from src.trainer import TrainConfig
from src.utils import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def float64():
    """Run a test with float64 as torch's default dtype"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_config():
    """A few-second run: 10-step episodes, small networks, small batches"""
    def build(**overrides):
        values = dict(
            env="cartpole_swingup",
            encoder="vit",
            aux_task="none",
            seed=3,
            total_steps=12,
            episode_length=80,
            initial_steps=16,
            replay_buffer_size=500,
            batch_size=8,
            contrastive_batch_size=4,
            hidden_dim=32,
            latent_dim=16,
            vit_depth=2,
            attention_heads=2,
            vit_mlp_dim=16,
            mae_decoder_dim=8,
            mae_decoder_depth=1,
            mae_decoder_heads=2,
            eval_episodes=2,
            eval_frequency=10,
        )
        values.update(overrides)
        return TrainConfig(**values)
    return build


@pytest.fixture
def pixel_batch(rng):
    def build(batch_size=4):
        return rng.integers(0, 256, size=(batch_size, 9, 100, 100), dtype=np.uint8)
    return build
