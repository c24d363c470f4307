"""Shared fixtures: a small grid, a light backbone and a few synthetic scenes."""

import dataclasses

import pytest

from fleetaug.augment.gtbank import build_gt_database
from fleetaug.config.settings import ExperimentConfig
from fleetaug.features.backbone import BackboneSpec, init_backbone
from fleetaug.features.voxelgrid import GridSpec
from fleetaug.scenes import SceneSpec, gen_scenes, scene_pairs

# 40 x 40 BEV cells, 6 z-slices
SMALL_GRID = GridSpec(0.0, 16.0, -8.0, 8.0, -2.5, 0.5, 0.4, 0.4, 0.5)
# depth 6 -> 3 -> 2, so 16 BEV channels
SMALL_BACKBONE = BackboneSpec(channels=(4, 4, 8), strides=((2, 1, 1), (2, 1, 1)), seed=3)
SMALL_SCENE = SceneSpec(
    extent=SMALL_GRID,
    cars_min=2,
    cars_max=3,
    points_per_car_min=40,
    points_per_car_max=80,
    clutter_points=300,
)


def small_config(**changes) -> ExperimentConfig:
    """A config that runs end to end in seconds."""
    cfg = ExperimentConfig(
        n_labeled=3,
        n_unlabeled=4,
        n_test=2,
        scene=SMALL_SCENE,
        backbone=SMALL_BACKBONE,
        pretrain_epochs=1,
        pretrain_gt_per_scene=1,
        labeled_batch=2,
        gt_per_scene=2,
        set_points=32,
        epochs=1,
        workers=1,
    )
    cfg = dataclasses.replace(cfg, **changes)
    cfg.validate()
    return cfg


@pytest.fixture
def grid():
    return SMALL_GRID


@pytest.fixture
def scene_spec():
    return SMALL_SCENE


@pytest.fixture
def backbone():
    bb = init_backbone(SMALL_BACKBONE)
    bb.freeze()
    return bb


@pytest.fixture
def scenes():
    return gen_scenes(SMALL_SCENE, seed=11, count=4)


@pytest.fixture
def gt_db(scenes):
    return build_gt_database(scene_pairs(scenes), [s.scene_id for s in scenes])
