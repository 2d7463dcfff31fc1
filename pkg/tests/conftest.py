import os

# Pin math libraries to one thread before numpy loads: reproducible runs,
# flat per-frame latency.
os.environ.setdefault("ME_RPPG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from merppg.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(
        input_resolution=(8, 8),
        encoder_channels=(4, 8, 8),
        feature_dim=8,
        state_dim=4,
        n_heads=2,
        n_blocks=2,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_model(tiny_cfg)


@pytest.fixture(scope="session")
def small_cfg() -> ModelConfig:
    return ModelConfig(
        input_resolution=(8, 8),
        encoder_channels=(8, 16, 32),
        feature_dim=32,
        state_dim=8,
        n_heads=4,
        n_blocks=2,
        seed=1,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
