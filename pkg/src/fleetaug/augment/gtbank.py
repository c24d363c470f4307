"""GT database built from labeled scenes, and overlap-free placement sampling."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fleetaug.features.voxelgrid import GridSpec
from fleetaug.geometry.boxes import (
    CAR,
    Box3D,
    PointsLike,
    box_corners_bev,
    normalize_yaw,
    points_array,
    points_in_box,
    to_box_frame,
)
from fleetaug.geometry.iou import iou_bev

logger = logging.getLogger(__name__)

PLACEMENT_RETRIES = 20


@dataclass(frozen=True, eq=False)
class GtEntry:
    """A labeled box with its points expressed in the box frame."""

    box: Box3D
    local_points: np.ndarray  # (N, 4): x, y, z in box frame, intensity
    source_scene: Optional[int] = None

    def __post_init__(self):
        local = np.array(self.local_points, dtype=np.float64).reshape(-1, 4)
        if local.shape[0] == 0:
            raise ValueError("GtEntry needs at least one point")
        local.setflags(write=False)
        object.__setattr__(self, "local_points", local)

    @property
    def num_points(self) -> int:
        return int(self.local_points.shape[0])


@dataclass(frozen=True)
class GtDatabase:
    """Immutable collection of GT entries indexed by class."""

    entries: Tuple[GtEntry, ...]
    by_class: Dict[int, Tuple[int, ...]] = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        index: Dict[int, List[int]] = {}
        for i, entry in enumerate(self.entries):
            index.setdefault(entry.box.class_id, []).append(i)
        object.__setattr__(self, "by_class", {k: tuple(v) for k, v in index.items()})

    def __len__(self) -> int:
        return len(self.entries)

    def source_scenes(self) -> set:
        return {entry.source_scene for entry in self.entries}


@dataclass(frozen=True)
class Placement:
    """A database entry dropped into a scene at a new pose."""

    entry_index: int
    entry: GtEntry = field(compare=False, repr=False)
    x: float
    y: float
    z: float
    yaw: float

    @property
    def box(self) -> Box3D:
        src = self.entry.box
        return Box3D(self.x, self.y, self.z, src.length, src.width, src.height, self.yaw, src.class_id)

    def world_points(self) -> np.ndarray:
        """Entry points transformed to the placed pose, shape (N, 4)."""
        local = self.entry.local_points
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        world = np.empty_like(local)
        world[:, 0] = self.x + c * local[:, 0] - s * local[:, 1]
        world[:, 1] = self.y + s * local[:, 0] + c * local[:, 1]
        world[:, 2] = self.z + local[:, 2]
        world[:, 3] = local[:, 3]
        return world


def build_gt_database(
    labeled: Sequence[Tuple[PointsLike, Sequence[Box3D]]],
    scene_ids: Optional[Sequence[int]] = None,
) -> GtDatabase:
    """
    Crop every labeled box out of its scene.

    Args:
        labeled: (points, boxes) per labeled scene
        scene_ids: Optional identifiers recorded as each entry's source

    Returns:
        Database with one entry per box that contains at least one point
    """
    if scene_ids is not None and len(scene_ids) != len(labeled):
        raise ValueError("scene_ids must match the number of labeled scenes")
    entries: List[GtEntry] = []
    skipped = 0
    for i, (points, boxes) in enumerate(labeled):
        pts = points_array(points)
        source = scene_ids[i] if scene_ids is not None else i
        for box in boxes:
            mask = points_in_box(pts, box)
            if not mask.any():
                skipped += 1
                continue
            local = np.concatenate([to_box_frame(pts[mask], box), pts[mask, 3:4]], axis=1)
            entries.append(GtEntry(box, local, source))
    if skipped:
        logger.info("skipped %d labeled boxes without points", skipped)
    return GtDatabase(tuple(entries))


def _inside_extent(box: Box3D, extent: GridSpec) -> bool:
    corners = box_corners_bev(box)
    return bool(
        np.all(corners[:, 0] >= extent.x_min)
        and np.all(corners[:, 0] <= extent.x_max)
        and np.all(corners[:, 1] >= extent.y_min)
        and np.all(corners[:, 1] <= extent.y_max)
    )


def _overlaps_any(box: Box3D, blocked: Sequence[Box3D]) -> bool:
    return any(iou_bev(box, other) > 0.0 for other in blocked)


def sample_placements(
    db: GtDatabase,
    forbidden: Sequence[Box3D],
    k: int,
    extent: GridSpec,
    ground_z: float,
    seed: int,
    class_id: int = CAR,
) -> List[Placement]:
    """
    Draw up to ``k`` placements that overlap neither ``forbidden`` nor each other.

    Each slot tries at most ``PLACEMENT_RETRIES`` candidates: a uniform entry
    of ``class_id``, uniform (x, y) over the extent, uniform yaw, and z so the
    box rests on ``ground_z``. Candidates leaving the extent or with positive
    BEV IoU against any blocked box are rejected; exhausted slots are skipped.

    Raises:
        ValueError: If ``k`` is negative, or positive with nothing to sample
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    if len(db) == 0:
        raise ValueError("cannot sample placements from an empty GT database")
    candidates = db.by_class.get(class_id)
    if not candidates:
        raise ValueError(f"GT database has no entries of class {class_id}")

    rng = np.random.default_rng(seed)
    blocked: List[Box3D] = list(forbidden)
    placements: List[Placement] = []
    for slot in range(k):
        for _ in range(PLACEMENT_RETRIES):
            entry_index = int(candidates[int(rng.integers(len(candidates)))])
            entry = db.entries[entry_index]
            x = float(rng.uniform(extent.x_min, extent.x_max))
            y = float(rng.uniform(extent.y_min, extent.y_max))
            yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
            placement = Placement(
                entry_index, entry, x, y, ground_z + entry.box.height / 2.0, yaw
            )
            box = placement.box
            if not _inside_extent(box, extent) or _overlaps_any(box, blocked):
                continue
            placements.append(placement)
            blocked.append(box)
            break
        else:
            logger.debug("placement slot %d skipped after %d retries", slot, PLACEMENT_RETRIES)
    return placements
