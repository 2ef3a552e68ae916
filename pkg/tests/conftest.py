from dataclasses import replace

import pytest
from hypothesis import settings

from dualfed.config import RunConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    """A few rounds on a small task; fast enough for unit tests."""
    cfg = RunConfig(seed=3)
    return replace(cfg,
                   data=replace(cfg.data, num_classes=8, samples_per_class=30, test_per_class=20),
                   partition=replace(cfg.partition, num_clients=2),
                   train=replace(cfg.train, rounds=4, batch_size=16),
                   stage=replace(cfg.stage, fixed_m=2))
