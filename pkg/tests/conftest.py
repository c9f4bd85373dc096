import numpy as np
import pytest
import torch

from difftrack.config import Config


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def tiny_overrides() -> dict:
    """A configuration small enough that model-level tests run in seconds."""
    return {
        "image.template_size": 32, "image.search_size": 64,
        "encoder.dim": 32, "encoder.depth": 1, "encoder.heads": 2,
        "encoder.patch": 16,
        "text.dim": 16, "text.layers": 1, "text.heads": 2,
        "diffusion.image_size": 64, "diffusion.base_width": 16,
        "diffusion.heads": 2, "vae.base": 8,
        "fusion.heads": 1,
        "head.layers": 1,
        "train.batch": 2, "train.n_sequences": 2,
        "data.canvas": 128, "data.n_frames": 4, "data.n_distractors": 1,
    }


@pytest.fixture
def tiny_cfg() -> Config:
    return Config(tiny_overrides())


@pytest.fixture(scope="session")
def tiny_model_session():
    """One shared tiny model for read-only tests (do not mutate weights)."""
    from difftrack.model import build_model
    torch.manual_seed(0)
    return build_model(Config(tiny_overrides()))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
