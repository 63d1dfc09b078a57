import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("desk", deadline=None, max_examples=50)
settings.load_profile("desk")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pairs():
    """A handful of tiny pairs shared by model/trainer tests."""
    from icvedit.datagen import generate_pair

    dims = (2, 16, 16)
    return [
        generate_pair("add", 11, dims),
        generate_pair("remove", 12, dims),
        generate_pair("replace", 13, dims),
        generate_pair("style", 14, dims),
    ]


@pytest.fixture(scope="session")
def tiny_model_cfg():
    from icvedit.model import ModelConfig

    return ModelConfig(
        token_dim=16, heads=2, depth=2, lora_rank=2,
        max_frames=2, max_height=4, max_width=4,
    )
