from __future__ import annotations

from typing import List

import numpy as np
import pytest

from desk_sim.main.config import ModelConfig, SimConfig, TrainConfig
from desk_sim.main.dataset import ArrayDataset
from desk_sim.main.model import SimModel
from desk_sim.main.synthetic import synthetic_dataset

TINY_OVERRIDES = [
    "model.image_size=8",
    "model.patch_size=2",
    "model.backbone_dim=16",
    "model.backbone_depth=1",
    "model.backbone_heads=2",
    "model.embed_dim=16",
    "model.heads=2",
    "model.projector_depth=1",
    "model.decoder_depth=1",
    "model.dtype=float64",
]  # type: List[str]


def tiny_model_config(norm_kind: str = "layer-norm", seed: int = 0) -> ModelConfig:
    return ModelConfig(
        image_size=8,
        patch_size=2,
        backbone_dim=16,
        backbone_depth=1,
        backbone_heads=2,
        embed_dim=16,
        heads=2,
        projector_depth=1,
        decoder_depth=1,
        norm_kind=norm_kind,
        dtype="float64",
        init_seed=seed,
    )


def tiny_sim_config(**train) -> SimConfig:
    settings = dict(batch_size=4, total_epochs=2, warmup_epochs=1, checkpoint_every=1)
    settings.update(train)
    return SimConfig(model=tiny_model_config(), train=TrainConfig(**settings))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> SimModel:
    return SimModel(tiny_config)


@pytest.fixture
def shapes_dataset() -> ArrayDataset:
    return synthetic_dataset(8, 2, 16, seed=0)
