import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from upscale_kit.config import ModelConfig

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=64, embed_dim=16, intermediate_dim=24, n_layers=2,
                n_heads=4, n_kv_heads=2, n_experts=1, top_k=1,
                rope_theta=10000.0, sliding_window=None, ctx_len=64,
                tie_embeddings=False, norm_eps=1e-5)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def thai_text() -> str:
    with open(os.path.join(DATA_DIR, "thai_sample.txt"), encoding="utf-8") as f:
        return f.read()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
