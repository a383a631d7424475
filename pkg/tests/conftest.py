"""Shared builders for test fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from submerge.archive import TensorArchive
from submerge.model import ModelConfig


def random_checkpoint(config: ModelConfig, seed: int, scale: float = 0.25) -> TensorArchive:
    """A checkpoint with noticeable weights (not the tiny fixture init)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 1:
            tensors[name] = (1.0 + scale * rng.normal(size=shape)).astype(np.float32)
        else:
            tensors[name] = (scale * rng.normal(size=shape)).astype(np.float32)
    return TensorArchive(tensors=tensors, meta={"model_config": config.to_json()})


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(
        d_model=8, n_heads=2, n_layers=2, d_ff=16, vocab_size=11, max_seq=16
    )


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_config) -> TensorArchive:
    return random_checkpoint(tiny_config, seed=42)
