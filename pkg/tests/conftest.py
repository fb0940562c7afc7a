"""Shared fixtures: a tiny run configuration, a rendered corpus, a bundle and a run directory."""

import os

import pytest

from guided_slots.config import RunConfig
from guided_slots.factory import create_bundle
from guided_slots.repositories.run_repository import RunRepository
from guided_slots.services.scene_service import SceneService

TINY_OVERRIDES = {
    "scene": {"image_size": 32, "num_classes": 3, "min_objects": 1, "max_objects": 2, "seed": 0},
    "encoder": {"d_input": 16, "stride": 4},
    "slots": {"count": 3, "dim": 16, "iterations": 2},
    "decoder": {"broadcast_grid": 8, "hidden": 16},
    "diffusion": {
        "T": 4,
        "latent_size": 8,
        "d_token": 16,
        "base_channels": 8,
        "pretrain_steps": 2,
        "pretrain_batch_size": 4,
        "rendered_timesteps": [2, 3],
    },
    "training": {
        "batch_size": 4,
        "steps": 4,
        "log_every": 1,
        "eval_every": 2,
        "checkpoint_every": 2,
        "overlay_count": 1,
    },
    "probe": {"steps": 20, "eval_every": 5},
}


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """Keep developer ``.env`` files and GUIDED_SLOTS_* variables out of the tests."""
    monkeypatch.chdir(tmp_path)
    for key in list(os.environ):
        if key.startswith("GUIDED_SLOTS_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """Smallest configuration the networks accept: 32 px images, 8x8 features, T=4."""
    return RunConfig(run_root=str(tmp_path / "runs"), **TINY_OVERRIDES)


@pytest.fixture
def scene_service(tiny_config) -> SceneService:
    return SceneService(tiny_config.scene)


@pytest.fixture
def corpus(scene_service):
    return scene_service.render_many(12)


@pytest.fixture
def bundle(tiny_config):
    return create_bundle(tiny_config)


@pytest.fixture
def run(tmp_path) -> RunRepository:
    return RunRepository(tmp_path / "run").create()

