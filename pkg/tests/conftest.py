import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def tiny_encoder():
    from minimoco.nets import EncoderConfig

    return EncoderConfig(stage_channels=(3, 4), stage_strides=(1, 2))
