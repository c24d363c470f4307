"""GT database, augmentation policies, F-GT and raw-vs-feature analysis."""

from fleetaug.augment.analysis import (
    AugmentationReport,
    PolicyPair,
    analyze_augmentations,
    flip_pair,
    gt_only_feature,
    gt_pair,
    rmse_map,
    rotate_pair,
)
from fleetaug.augment.fgt import f_gt_grid, f_gt_set
from fleetaug.augment.gtbank import (
    GtDatabase,
    GtEntry,
    Placement,
    build_gt_database,
    sample_placements,
)
from fleetaug.augment.policies import (
    FCompose,
    FFlip,
    FNoise,
    FRS,
    FRotate,
    Flip,
    GtPlace,
    RandomSample,
    Rotate,
    augment_points,
    perturb_feature,
    transform_labels,
)

__all__ = [
    "AugmentationReport",
    "FCompose",
    "FFlip",
    "FNoise",
    "FRS",
    "FRotate",
    "Flip",
    "GtDatabase",
    "GtEntry",
    "GtPlace",
    "Placement",
    "PolicyPair",
    "RandomSample",
    "Rotate",
    "analyze_augmentations",
    "augment_points",
    "build_gt_database",
    "f_gt_grid",
    "f_gt_set",
    "flip_pair",
    "gt_only_feature",
    "gt_pair",
    "perturb_feature",
    "rmse_map",
    "rotate_pair",
    "sample_placements",
    "transform_labels",
]
