import numpy as np
import pytest

from lionlora.adapter import AdapterSet, LoraAdapter, init_adapter
from lionlora.model import ModelConfig, ToyDiT
from lionlora.tensor import Tensor

TINY = ModelConfig(num_blocks=2, channels=8, heads=2, frames=2, frame_size=4, patch_size=2,
                   diffusion_steps=20)


def random_adapter(config, seed, name="ad", rank=2, scale=1.0, dtype="f64"):
    """An adapter with non-zero A and B at every attachment point."""
    rng = np.random.default_rng(seed)
    layers = {}
    for lid, (d_in, d_out) in config.attachment_points().items():
        a = rng.normal(0, 0.3, size=(d_in, rank)) * scale
        b = rng.normal(0, 0.3, size=(rank, d_out))
        layers[lid] = LoraAdapter(Tensor(a, dtype=dtype), Tensor(b, dtype=dtype))
    return AdapterSet(name, layers)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return ToyDiT(TINY, seed=3, dtype="f64")


@pytest.fixture
def zero_adapter():
    return init_adapter(TINY, rank=2, seed=1, dtype="f64")
