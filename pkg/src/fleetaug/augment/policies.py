"""Raw-level and feature-level augmentation policies."""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from fleetaug.augment.gtbank import GtDatabase, Placement
from fleetaug.features.voxelgrid import BevFeature, GridSpec
from fleetaug.geometry.boxes import Box3D, PointsLike, points_array, rotate_points_z
from fleetaug.seeding import derive_seed

MAX_FEATURE_ROTATION = math.pi / 4
_DEFAULT_CENTER = GridSpec().center_xy


@dataclass(frozen=True)
class Flip:
    """Mirror across the x-axis (y -> -y)."""


@dataclass(frozen=True)
class Rotate:
    """Rotate points and boxes about the vertical axis through ``center``."""

    angle: float
    center: Tuple[float, float] = _DEFAULT_CENTER


@dataclass(frozen=True)
class RandomSample:
    """Keep each point independently with probability ``keep_ratio``."""

    keep_ratio: float

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")


@dataclass(frozen=True)
class GtPlace:
    """Paste database entries at the given placements."""

    placements: Tuple[Placement, ...]

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))


RawPolicy = Union[Flip, Rotate, RandomSample, GtPlace]


@dataclass(frozen=True)
class FFlip:
    """Move cell (yi, xi) to (H - 1 - yi, xi)."""


@dataclass(frozen=True)
class FRotate:
    """Rotate the map about its center with bilinear resampling."""

    angle: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "FRotate":
        return cls(float(rng.uniform(-MAX_FEATURE_ROTATION, MAX_FEATURE_ROTATION)))


@dataclass(frozen=True)
class FNoise:
    """Zero-mean Gaussian noise on stored values."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class FRS:
    """Null a random share of the stored scalar values."""

    null_ratio: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.null_ratio < 1.0:
            raise ValueError(f"null_ratio must be in (0, 1), got {self.null_ratio}")


@dataclass(frozen=True)
class FCompose:
    """Apply feature policies left to right."""

    policies: Tuple["FeaturePolicy", ...]

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))


FeaturePolicy = Union[FFlip, FRotate, FNoise, FRS, FCompose]


def augment_points(
    points: PointsLike,
    boxes: Sequence[Box3D],
    policy: RawPolicy,
    db: Optional[GtDatabase] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, List[Box3D]]:
    """
    Apply a raw-level policy to a labeled point cloud.

    Args:
        points: Point cloud
        boxes: Labels of the cloud
        policy: Raw policy
        db: GT database the placements were drawn from (GtPlace only)
        seed: Seed for stochastic policies

    Returns:
        Augmented (points, boxes)
    """
    pts = points_array(points)
    boxes = list(boxes)
    if isinstance(policy, Flip):
        flipped = pts.copy()
        flipped[:, 1] = -flipped[:, 1]
        return flipped, [box.mirrored_y(0.0) for box in boxes]
    if isinstance(policy, Rotate):
        if policy.angle == 0.0:
            return pts.copy(), boxes
        return (
            rotate_points_z(pts, policy.angle, policy.center),
            [box.rotated(policy.angle, policy.center) for box in boxes],
        )
    if isinstance(policy, RandomSample):
        rng = np.random.default_rng(seed)
        keep = rng.random(pts.shape[0]) < policy.keep_ratio
        return pts[keep], boxes
    if isinstance(policy, GtPlace):
        if db is None:
            raise ValueError("GtPlace requires a GT database")
        for placement in policy.placements:
            if db.entries[placement.entry_index] is not placement.entry:
                raise ValueError(f"placement entry {placement.entry_index} is not from this database")
        pasted = [p.world_points() for p in policy.placements]
        return (
            np.concatenate([pts] + pasted, axis=0),
            boxes + [p.box for p in policy.placements],
        )
    raise ValueError(f"unsupported raw policy: {policy!r}")


def _rotate_map(values: np.ndarray, angle: float, spec: GridSpec) -> np.ndarray:
    height, width, channels = values.shape
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    center_row = (height - 1) / 2.0
    center_col = (width - 1) / 2.0
    d_row = rows - center_row
    d_col = cols - center_col
    c, s = math.cos(angle), math.sin(angle)
    # Inverse mapping: each output cell center is rotated back by -angle in
    # metric space to find where it samples the input.
    src_col = center_col + c * d_col + s * d_row * (spec.vy / spec.vx)
    src_row = center_row - s * d_col * (spec.vx / spec.vy) + c * d_row
    coordinates = np.stack([src_row, src_col])
    out = np.empty((height, width, channels), dtype=np.float64)
    source = values.astype(np.float64)
    for channel in range(channels):
        out[:, :, channel] = ndimage.map_coordinates(
            source[:, :, channel], coordinates, order=1, mode="grid-constant", cval=0.0
        )
    return out


def perturb_feature(f: BevFeature, policy: FeaturePolicy, seed: int = 0) -> BevFeature:
    """Apply a feature-level policy to a BEV map."""
    if isinstance(policy, FFlip):
        return BevFeature(f.spec, f.values[::-1])
    if isinstance(policy, FRotate):
        if policy.angle == 0.0:
            return f
        return BevFeature(f.spec, _rotate_map(f.values, policy.angle, f.spec))
    if isinstance(policy, FNoise):
        rng = np.random.default_rng(seed)
        values = f.values.astype(np.float64)
        stored = f.occupied()
        values[stored] += rng.normal(0.0, policy.sigma, size=(int(stored.sum()), f.channels))
        return BevFeature(f.spec, values)
    if isinstance(policy, FRS):
        rng = np.random.default_rng(seed)
        values = np.array(f.values)
        stored = np.flatnonzero(np.repeat(f.occupied().reshape(-1), f.channels))
        count = int(round(policy.null_ratio * stored.size))
        nulled = rng.choice(stored, size=count, replace=False)
        values.reshape(-1)[nulled] = 0.0
        return BevFeature(f.spec, values)
    if isinstance(policy, FCompose):
        for step, inner in enumerate(policy.policies):
            f = perturb_feature(f, inner, derive_seed(seed, step))
        return f
    raise ValueError(f"unsupported feature policy: {policy!r}")


def transform_labels(boxes: Sequence[Box3D], policy: FeaturePolicy, spec: GridSpec) -> List[Box3D]:
    """Move labels the way ``policy`` moves the feature map; value policies keep them."""
    if isinstance(policy, FFlip):
        axis = (spec.y_min + spec.y_max) / 2.0
        return [box.mirrored_y(axis) for box in boxes]
    if isinstance(policy, FRotate):
        if policy.angle == 0.0:
            return list(boxes)
        return [box.rotated(policy.angle, spec.center_xy) for box in boxes]
    if isinstance(policy, (FNoise, FRS)):
        return list(boxes)
    if isinstance(policy, FCompose):
        boxes = list(boxes)
        for inner in policy.policies:
            boxes = transform_labels(boxes, inner, spec)
        return boxes
    raise ValueError(f"unsupported feature policy: {policy!r}")
