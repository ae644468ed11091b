import numpy as np
import pytest

from mnm.model import ModelConfig
from mnm.synthdata import DatasetConfig, generate_dataset

MICRO = ModelConfig(
    num_proposals=3, dim=8, heads=2, stages=2, roi_size=3, dynamic_dim=4, ffn_dim=16,
    backbone_channels=(4, 4), dropout=0.0, image_size=(32, 32),
)

SMALL = ModelConfig(
    num_proposals=6, dim=16, heads=4, stages=6, roi_size=3, dynamic_dim=4, ffn_dim=32,
    backbone_channels=(4, 8), dropout=0.0,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = DatasetConfig(counts={"malignant": 6, "benign": 4, "negative": 6}, seed=3)
    return generate_dataset(cfg)
