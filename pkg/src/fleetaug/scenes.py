"""Synthetic lidar scenes: ground clutter plus cars seen from the sensor origin."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from fleetaug.detection.head import CAR_PRIOR
from fleetaug.features.voxelgrid import GridSpec
from fleetaug.geometry.boxes import CAR, Box3D, box_corners_bev, points_in_box
from fleetaug.geometry.iou import iou_bev
from fleetaug.seeding import derive_seed

logger = logging.getLogger(__name__)

CAR_RETRIES = 50
SHELL_SCALE = 0.96  # car points sit slightly inside their box


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene generator."""

    extent: GridSpec = field(default_factory=GridSpec)
    cars_min: int = 2
    cars_max: int = 8
    points_per_car_min: int = 40
    points_per_car_max: int = 150
    clutter_points: int = 2000
    ground_z: float = -1.6
    dim_jitter: float = 0.1  # relative, around the car prior
    seed: int = 0

    def __post_init__(self):
        if self.cars_min < 0 or self.cars_max < self.cars_min:
            raise ValueError(f"invalid car count range [{self.cars_min}, {self.cars_max}]")
        if self.points_per_car_min < 1 or self.points_per_car_max < self.points_per_car_min:
            raise ValueError(
                f"invalid points-per-car range [{self.points_per_car_min}, {self.points_per_car_max}]"
            )
        if self.clutter_points < 0:
            raise ValueError(f"clutter_points must be >= 0, got {self.clutter_points}")
        if not 0.0 <= self.dim_jitter < 1.0:
            raise ValueError(f"dim_jitter must be in [0, 1), got {self.dim_jitter}")
        if not self.extent.z_min < self.ground_z < self.extent.z_max:
            raise ValueError(f"ground_z {self.ground_z} lies outside the grid z range")


@dataclass(frozen=True, eq=False)
class Scene:
    """A point cloud (N, 4) and its car labels."""

    points: np.ndarray
    labels: Tuple[Box3D, ...]
    scene_id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.labels == other.labels
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None

    def as_pair(self) -> Tuple[np.ndarray, Tuple[Box3D, ...]]:
        return self.points, self.labels


def _inside(box: Box3D, extent: GridSpec) -> bool:
    corners = box_corners_bev(box)
    return bool(
        corners[:, 0].min() >= extent.x_min
        and corners[:, 0].max() <= extent.x_max
        and corners[:, 1].min() >= extent.y_min
        and corners[:, 1].max() <= extent.y_max
    )


def _place_cars(spec: SceneSpec, rng: np.random.Generator) -> List[Box3D]:
    extent = spec.extent
    wanted = int(rng.integers(spec.cars_min, spec.cars_max + 1))
    cars: List[Box3D] = []
    for _ in range(wanted):
        for _ in range(CAR_RETRIES):
            scale = rng.uniform(1.0 - spec.dim_jitter, 1.0 + spec.dim_jitter, size=3)
            length, width, height = (float(d * s) for d, s in zip(CAR_PRIOR, scale))
            box = Box3D(
                float(rng.uniform(extent.x_min, extent.x_max)),
                float(rng.uniform(extent.y_min, extent.y_max)),
                spec.ground_z + height / 2.0,
                length,
                width,
                height,
                float(rng.uniform(-math.pi, math.pi)),
                CAR,
            )
            if _inside(box, extent) and all(iou_bev(box, other) == 0.0 for other in cars):
                cars.append(box)
                break
    if len(cars) < wanted:
        logger.debug("placed %d of %d cars", len(cars), wanted)
    return cars


def _car_shell(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the two faces facing the origin plus the near roof edge."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # sensor position in the box frame
    sensor_x = -(c * box.cx + s * box.cy)
    sensor_y = -(-s * box.cx + c * box.cy)
    sign_x = 1.0 if sensor_x >= 0 else -1.0
    sign_y = 1.0 if sensor_y >= 0 else -1.0
    half_l, half_w, half_h = box.length / 2.0, box.width / 2.0, box.height / 2.0

    part = rng.choice(3, size=count, p=(0.4, 0.4, 0.2))
    local = np.empty((count, 3), dtype=np.float64)
    local[:, 0] = rng.uniform(-half_l, half_l, count)
    local[:, 1] = rng.uniform(-half_w, half_w, count)
    local[:, 2] = rng.uniform(-half_h, half_h, count)
    front = part == 0
    local[front, 0] = sign_x * half_l
    side = part == 1
    local[side, 1] = sign_y * half_w
    roof = part == 2
    local[roof, 1] = sign_y * half_w * rng.uniform(0.5, 1.0, int(roof.sum()))
    local[roof, 2] = half_h
    local *= SHELL_SCALE

    points = np.empty((count, 4), dtype=np.float64)
    points[:, 0] = box.cx + c * local[:, 0] - s * local[:, 1]
    points[:, 1] = box.cy + s * local[:, 0] + c * local[:, 1]
    points[:, 2] = box.cz + local[:, 2]
    points[:, 3] = rng.uniform(0.4, 0.9, count)
    return points


def gen_scene(spec: SceneSpec, seed: int, scene_id: int = 0) -> Scene:
    """
    Generate one scene deterministically from ``seed``.

    Clutter is uniform over the extent near the ground plane with small
    vertical jitter; clutter inside a car box is dropped. Cars are placed
    without BEV overlap and carry points_per_car_min..max shell points each.
    """
    rng = np.random.default_rng(seed)
    extent = spec.extent
    cars = _place_cars(spec, rng)

    clutter = np.empty((spec.clutter_points, 4), dtype=np.float64)
    clutter[:, 0] = rng.uniform(extent.x_min, extent.x_max, spec.clutter_points)
    clutter[:, 1] = rng.uniform(extent.y_min, extent.y_max, spec.clutter_points)
    clutter[:, 2] = spec.ground_z + rng.normal(0.0, 0.05, spec.clutter_points)
    clutter[:, 3] = rng.uniform(0.0, 0.3, spec.clutter_points)
    keep = np.ones(spec.clutter_points, dtype=bool)
    for box in cars:
        keep &= ~points_in_box(clutter, box)

    parts = [clutter[keep]]
    for box in cars:
        count = int(rng.integers(spec.points_per_car_min, spec.points_per_car_max + 1))
        parts.append(_car_shell(box, count, rng))
    return Scene(np.concatenate(parts, axis=0), tuple(cars), scene_id)


def gen_scenes(spec: SceneSpec, seed: int, count: int, first_id: int = 0) -> List[Scene]:
    """Scenes ``first_id .. first_id + count - 1``, each seeded from (seed, scene_id)."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    return [
        gen_scene(spec, derive_seed(seed, scene_id), scene_id)
        for scene_id in range(first_id, first_id + count)
    ]


def scene_pairs(scenes: Sequence[Scene]) -> List[Tuple[np.ndarray, Tuple[Box3D, ...]]]:
    return [scene.as_pair() for scene in scenes]
