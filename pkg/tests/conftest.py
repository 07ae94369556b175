import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_config():
    """A small network: 4 bands, 16x16 HR, narrow extractors, 2 heads."""
    from hypertransformer.model import ModelConfig

    def make(**overrides):
        base = dict(bands=4, hr_size=(16, 16), fe_channels=(4, 6, 8), residual_blocks=(1, 1, 1), heads=2)
        base.update(overrides)
        return ModelConfig(**base)

    return make


@pytest.fixture
def tiny_patch():
    from hypertransformer.pipeline import synth_dataset

    return synth_dataset(3, 1, 4, 16, 16)[0]
