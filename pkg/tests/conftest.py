import numpy as np
import pytest

from gatedprompt.prompts import build_trainable_mask, init_tuning_params
from gatedprompt.vit import ViTConfig, init_params

TOY = ViTConfig(image_size=32, channels=3, patch_size=8, embed_dim=64,
                num_blocks=6, num_heads=4, mlp_ratio=4, num_classes=10)

# Small enough that full finite-difference sweeps stay fast.
TINY = ViTConfig(image_size=16, channels=3, patch_size=8, embed_dim=16,
                 num_blocks=3, num_heads=2, mlp_ratio=2, num_classes=4)


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


def make_tuned_params(config, mode="gated", n_prompts=3, seed=0, with_temps=True,
                      gate_init=5.0):
    """Backbone + tuning parameters with requires_grad set from the mask."""
    params = init_params(config, seed)
    params.update(init_tuning_params(config, mode, n_prompts, seed + 1,
                                     gate_init=gate_init, with_temps=with_temps))
    mask = build_trainable_mask(config, mode, with_temps)
    for name, t in params.items():
        t.requires_grad = name in mask
    return params, mask


def random_images(config, batch, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0,
                       size=(batch, config.image_size, config.image_size, config.channels))
