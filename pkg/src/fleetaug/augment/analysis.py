"""Raw-level versus feature-level augmentation error."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from fleetaug.augment.fgt import f_gt_grid
from fleetaug.augment.gtbank import GtDatabase, Placement, sample_placements
from fleetaug.augment.policies import (
    FeaturePolicy,
    FFlip,
    FRotate,
    Flip,
    GtPlace,
    RawPolicy,
    Rotate,
    augment_points,
    perturb_feature,
)
from fleetaug.features.backbone import Backbone, extract_grid_feature
from fleetaug.features.voxelgrid import BevFeature, GridSpec, voxelize
from fleetaug.geometry.boxes import Box3D, PointsLike, points_array
from fleetaug.seeding import derive_seed

logger = logging.getLogger(__name__)

ANALYZED_POLICIES = ("GT", "Rotation", "Flip")


@dataclass(frozen=True)
class FGtGrid:
    """Feature-side counterpart of GtPlace: f_gt_grid with the GT-only feature."""

    placements: Tuple[Placement, ...]

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))


@dataclass(frozen=True)
class PolicyPair:
    """The same logical augmentation expressed on raw points and on features."""

    name: str
    raw: RawPolicy
    feature: Union[FeaturePolicy, FGtGrid]


def flip_pair() -> PolicyPair:
    return PolicyPair("Flip", Flip(), FFlip())


def rotate_pair(angle: float, spec: GridSpec) -> PolicyPair:
    return PolicyPair("Rotation", Rotate(angle, spec.center_xy), FRotate(angle))


def gt_pair(placements: Sequence[Placement]) -> PolicyPair:
    return PolicyPair("GT", GtPlace(tuple(placements)), FGtGrid(tuple(placements)))


def _feature(bb: Backbone, points: np.ndarray, spec: GridSpec) -> BevFeature:
    return extract_grid_feature(bb, voxelize(points, spec))


def gt_only_feature(bb: Backbone, placements: Sequence[Placement], spec: GridSpec) -> BevFeature:
    """Backbone feature of a cloud holding only the placed GT points."""
    if not placements:
        return BevFeature.empty(spec, bb.spec.bev_channels(spec))
    cloud = np.concatenate([p.world_points() for p in placements], axis=0)
    return _feature(bb, cloud, spec)


def rmse_map(
    points: PointsLike,
    pair: PolicyPair,
    bb: Backbone,
    spec: GridSpec,
    db: GtDatabase = None,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """
    Compare a raw-level augmentation with its feature-level counterpart.

    ``A`` is the feature of the augmented cloud, ``B`` the augmented feature of
    the original cloud. Absent cells count as zero vectors.

    Returns:
        (per-cell RMSE over channels with shape (H, W), scalar RMSE over all cells)
    """
    pts = points_array(points)
    augmented, _ = augment_points(pts, [], pair.raw, db=db, seed=seed)
    a = _feature(bb, augmented, spec)
    base = _feature(bb, pts, spec)
    if isinstance(pair.feature, FGtGrid):
        b = f_gt_grid(base, gt_only_feature(bb, pair.feature.placements, spec))
    else:
        b = perturb_feature(base, pair.feature, seed)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    per_cell = np.sqrt(np.mean(diff * diff, axis=-1))
    scalar = float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0
    return per_cell, scalar


@dataclass
class AugmentationReport:
    """Per-scene scalar RMSE per policy plus one heatmap per policy."""

    scalars: Dict[str, List[float]]
    heatmaps: Dict[str, np.ndarray]

    def mean(self, policy: str) -> float:
        return float(np.mean(self.scalars[policy])) if self.scalars[policy] else 0.0

    def ordering(self) -> List[str]:
        """Policies sorted by ascending mean RMSE."""
        return sorted(self.scalars, key=self.mean)


def analyze_augmentations(
    scenes: Sequence[Tuple[PointsLike, Sequence[Box3D]]],
    bb: Backbone,
    spec: GridSpec,
    db: GtDatabase,
    seed: int,
    gt_per_scene: int = 5,
    ground_z: float = -1.6,
) -> AugmentationReport:
    """
    Run the GT, Rotation and Flip pairs over a set of scenes.

    Rotation angles are drawn uniformly from [-pi/4, pi/4] per scene; GT
    placements avoid each scene's own labels. The heatmaps come from the
    first scene.
    """
    report = AugmentationReport({name: [] for name in ANALYZED_POLICIES}, {})
    for index, (points, boxes) in enumerate(scenes):
        rng = np.random.default_rng(derive_seed(seed, index, 0))
        placements = sample_placements(
            db, boxes, gt_per_scene, spec, ground_z, derive_seed(seed, index, 1)
        )
        pairs = (
            gt_pair(placements),
            rotate_pair(FRotate.random(rng).angle, spec),
            flip_pair(),
        )
        for pair in pairs:
            per_cell, scalar = rmse_map(points, pair, bb, spec, db=db, seed=derive_seed(seed, index, 2))
            report.scalars[pair.name].append(scalar)
            if index == 0:
                report.heatmaps[pair.name] = per_cell
        logger.debug("scene %d analyzed", index)
    return report
