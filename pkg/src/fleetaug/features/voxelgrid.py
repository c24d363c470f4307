"""Voxelization, sparse voxel grids and bird's-eye-view compression."""

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from fleetaug.geometry.boxes import PointsLike, points_array

VOXEL_CHANNELS = 4  # x/y/z offset from voxel center, intensity


def _axis_cells(lo: float, hi: float, size: float) -> int:
    return int(math.ceil((hi - lo) / size - 1e-9))


@dataclass(frozen=True)
class GridSpec:
    """Scene extent and voxel size, in meters."""

    x_min: float = 0.0
    x_max: float = 70.4
    y_min: float = -40.0
    y_max: float = 40.0
    z_min: float = -3.0
    z_max: float = 1.0
    vx: float = 0.4
    vy: float = 0.4
    vz: float = 0.5

    def __post_init__(self):
        for lo, hi, axis in (
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
            (self.z_min, self.z_max, "z"),
        ):
            if not hi > lo:
                raise ValueError(f"GridSpec {axis}: max must exceed min ({lo}, {hi})")
        if min(self.vx, self.vy, self.vz) <= 0:
            raise ValueError("GridSpec voxel sizes must be positive")

    @property
    def width(self) -> int:
        return _axis_cells(self.x_min, self.x_max, self.vx)

    @property
    def height(self) -> int:
        return _axis_cells(self.y_min, self.y_max, self.vy)

    @property
    def depth(self) -> int:
        return _axis_cells(self.z_min, self.z_max, self.vz)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(D, H, W)"""
        return self.depth, self.height, self.width

    @property
    def center_xy(self) -> Tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def cell_center(self, yi: float, xi: float) -> Tuple[float, float]:
        """World (x, y) of a BEV cell center."""
        return self.x_min + (xi + 0.5) * self.vx, self.y_min + (yi + 0.5) * self.vy

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """World x and y of every BEV cell center, each of shape (H, W)."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.vx
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.vy
        grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
        return grid_x, grid_y

    def world_to_cell(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) indices with cell centers at integers."""
        col = (np.asarray(x, dtype=np.float64) - self.x_min) / self.vx - 0.5
        row = (np.asarray(y, dtype=np.float64) - self.y_min) / self.vy - 0.5
        return row, col

    def contains_xy(self, x, y) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)


def _canonical(values: np.ndarray) -> np.ndarray:
    # Adding +0.0 turns negative zeros into positive ones.
    out = np.ascontiguousarray(values, dtype=np.float32) + np.float32(0.0)
    out.setflags(write=False)
    return out


class _DenseCells:
    """Shared behaviour of dense arrays whose all-zero cells count as absent."""

    values: np.ndarray
    spec: GridSpec

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])

    def occupied(self) -> np.ndarray:
        """Boolean mask of stored (non-all-zero) cells."""
        return np.any(self.values != 0, axis=-1)

    def cells(self) -> Dict[Tuple[int, ...], np.ndarray]:
        """Stored cells as a mapping from index tuple to channel vector."""
        mask = self.occupied()
        return {
            tuple(int(i) for i in index): self.values[tuple(index)]
            for index in np.argwhere(mask)
        }

    def __eq__(self, other) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.values.shape == other.values.shape
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )

    __hash__ = None


class SparseVoxelGrid(_DenseCells):
    """
    Voxel grid of shape (D, H, W, channels).

    Cells whose channel vector is all zero are not stored; the dense array
    simply holds zeros there.
    """

    def __init__(self, spec: GridSpec, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 4 or values.shape[:3] != spec.dims:
            raise ValueError(
                f"voxel values must have shape {spec.dims} + (C,), got {values.shape}"
            )
        self.spec = spec
        self.values = _canonical(values)

    @classmethod
    def empty(cls, spec: GridSpec, channels: int = VOXEL_CHANNELS) -> "SparseVoxelGrid":
        return cls(spec, np.zeros(spec.dims + (channels,), dtype=np.float32))

    def __repr__(self) -> str:
        return (
            f"SparseVoxelGrid(dims={self.spec.dims}, channels={self.channels}, "
            f"occupied={int(self.occupied().sum())})"
        )


class BevFeature(_DenseCells):
    """Bird's-eye-view feature map of shape (H, W, C)."""

    def __init__(self, spec: GridSpec, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 3 or values.shape[:2] != (spec.height, spec.width):
            raise ValueError(
                f"BEV values must have shape ({spec.height}, {spec.width}, C), "
                f"got {values.shape}"
            )
        self.spec = spec
        self.values = _canonical(values)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @classmethod
    def empty(cls, spec: GridSpec, channels: int) -> "BevFeature":
        return cls(spec, np.zeros((spec.height, spec.width, channels), dtype=np.float32))

    @classmethod
    def from_cells(
        cls,
        spec: GridSpec,
        channels: int,
        cells: Mapping[Tuple[int, int], Sequence[float]],
    ) -> "BevFeature":
        """Build a feature from a sparse mapping (row, col) -> vector."""
        values = np.zeros((spec.height, spec.width, channels), dtype=np.float32)
        for (yi, xi), vector in cells.items():
            if not (0 <= yi < spec.height and 0 <= xi < spec.width):
                raise ValueError(f"cell ({yi}, {xi}) outside {spec.height}x{spec.width}")
            vector = np.asarray(vector, dtype=np.float32)
            if vector.shape != (channels,):
                raise ValueError(f"cell ({yi}, {xi}) must have {channels} channels")
            values[yi, xi] = vector
        return cls(spec, values)

    def __repr__(self) -> str:
        return (
            f"BevFeature(H={self.height}, W={self.width}, C={self.channels}, "
            f"stored={nonzero_cell_count(self)})"
        )


def voxelize(points: PointsLike, spec: GridSpec) -> SparseVoxelGrid:
    """
    Mean-pool points into voxels.

    Points outside the half-open extent are dropped. Each occupied voxel
    stores the mean of (x_offset, y_offset, z_offset, intensity), with
    offsets measured from the voxel center.

    Args:
        points: Point cloud
        spec: Grid layout

    Returns:
        Four-channel voxel grid
    """
    pts = points_array(points)
    depth, height, width = spec.dims
    values = np.zeros((depth, height, width, VOXEL_CHANNELS), dtype=np.float64)
    if pts.shape[0] == 0:
        return SparseVoxelGrid(spec, values)

    inside = (
        (pts[:, 0] >= spec.x_min)
        & (pts[:, 0] < spec.x_max)
        & (pts[:, 1] >= spec.y_min)
        & (pts[:, 1] < spec.y_max)
        & (pts[:, 2] >= spec.z_min)
        & (pts[:, 2] < spec.z_max)
    )
    pts = pts[inside]
    xi = np.floor((pts[:, 0] - spec.x_min) / spec.vx).astype(np.int64)
    yi = np.floor((pts[:, 1] - spec.y_min) / spec.vy).astype(np.int64)
    zi = np.floor((pts[:, 2] - spec.z_min) / spec.vz).astype(np.int64)
    in_range = (xi < width) & (yi < height) & (zi < depth)
    pts, xi, yi, zi = pts[in_range], xi[in_range], yi[in_range], zi[in_range]
    if pts.shape[0] == 0:
        return SparseVoxelGrid(spec, values)

    features = np.empty_like(pts)
    features[:, 0] = pts[:, 0] - (spec.x_min + (xi + 0.5) * spec.vx)
    features[:, 1] = pts[:, 1] - (spec.y_min + (yi + 0.5) * spec.vy)
    features[:, 2] = pts[:, 2] - (spec.z_min + (zi + 0.5) * spec.vz)
    features[:, 3] = pts[:, 3]

    # Canonical order inside each voxel keeps the float sums independent of
    # the input point order.
    linear = (zi * height + yi) * width + xi
    order = np.lexsort((features[:, 3], features[:, 2], features[:, 1], features[:, 0], linear))
    linear = linear[order]
    features = features[order]
    starts = np.flatnonzero(np.r_[True, linear[1:] != linear[:-1]])
    sums = np.add.reduceat(features, starts, axis=0)
    counts = np.diff(np.r_[starts, linear.size])
    flat = values.reshape(-1, VOXEL_CHANNELS)
    flat[linear[starts]] = sums / counts[:, None]
    return SparseVoxelGrid(spec, values)


def bev_compress(grid: SparseVoxelGrid) -> BevFeature:
    """
    Stack z-slices into channels.

    Output channel ``zi * C_in + c`` holds input channel ``c`` of slice ``zi``.
    """
    depth, height, width, channels = grid.values.shape
    stacked = np.transpose(grid.values, (1, 2, 0, 3)).reshape(height, width, depth * channels)
    return BevFeature(grid.spec, stacked)


def nonzero_cell_count(feature: BevFeature) -> int:
    """Number of stored (non-all-zero) BEV cells."""
    return int(feature.occupied().sum())
