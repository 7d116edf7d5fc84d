import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dualvvs.data import synth_image_set  # noqa: E402
from dualvvs.model import BackboneConfig, DualTaskModel, HeadConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_images():
    return synth_image_set(7, 64, 4, 32)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return DualTaskModel(BackboneConfig("tiny_conv", 16, 32), HeadConfig(8, 16), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
