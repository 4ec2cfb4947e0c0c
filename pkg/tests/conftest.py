import numpy as np
import pytest

from volformer.model import ModelConfig, ModelParams, parameter_shapes
from volformer.rng import Rng


def tiny_config(**overrides) -> ModelConfig:
    """The small configuration used throughout the tests: 8 tokens of
    width 32, embed dim 8, 2 heads, 2 layers, 3 classes (2115 params)."""
    base = dict(slices=4, height=8, width=8, channels=1,
                patch_slices=2, patch_height=4, patch_width=4,
                embed_dim=8, num_heads=2, num_layers=2, num_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


def random_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """A generic random parameter point (non-degenerate gammas/biases),
    for verification code that wants gradients well away from zero."""
    rng = Rng(seed)
    mapping = {}
    for name, shape in parameter_shapes(config):
        vals = rng.normal(int(np.prod(shape))).reshape(shape)
        if name.endswith(".gamma"):
            mapping[name] = 1.0 + 0.2 * vals
        elif name.endswith(("weight", ".w1", ".w2")):
            mapping[name] = 0.5 * vals
        else:
            mapping[name] = 0.2 * vals
    return ModelParams.from_arrays(config, mapping, dtype=dtype)


@pytest.fixture
def tiny():
    return tiny_config()
