import numpy as np
import pytest
import torch

from diffcast.core import ModelConfig

torch.set_num_threads(1)


def toy_config(**kw) -> ModelConfig:
    base = dict(L_in=3, L_out=4, K=2, T=20, sample_steps=5, hidden_size=8, channel_mults=[1, 2],
                depth=2, backbone="convgru", backbone_hidden=8, seed=0, lr=1e-3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
