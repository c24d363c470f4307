"""Oriented boxes, points and detections."""

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Tuple, Union

import numpy as np

CLASS_NAMES: Tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
CAR = 0

# Column layout of box arrays: cx, cy, cz, length, width, height, yaw
BOX_DIM = 7


def normalize_yaw(yaw: float) -> float:
    """Map an angle onto (-pi, pi]."""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def normalize_yaw_array(yaw: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_yaw`."""
    yaw = np.asarray(yaw, dtype=np.float64)
    wrapped = yaw - 2.0 * np.pi * np.round(yaw / (2.0 * np.pi))
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    return np.where(wrapped <= -np.pi, np.pi, wrapped)


class Point3(NamedTuple):
    """A single lidar return."""

    x: float
    y: float
    z: float
    intensity: float = 0.0


PointsLike = Union[np.ndarray, Sequence[Point3], Sequence[Sequence[float]]]


def points_array(points: PointsLike) -> np.ndarray:
    """
    Coerce a point cloud to a float64 array of shape (N, 4).

    Args:
        points: Sequence of Point3 / 4-tuples, or an array with 3 or 4 columns.
            A missing intensity column is filled with zeros.

    Returns:
        (N, 4) array of x, y, z, intensity

    Raises:
        ValueError: If the shape is wrong or any value is not finite
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise ValueError(f"points must have shape (N, 3) or (N, 4), got {arr.shape}")
    if arr.shape[1] == 3:
        arr = np.concatenate([arr, np.zeros((arr.shape[0], 1))], axis=1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain non-finite values")
    return arr


@dataclass(frozen=True)
class Box3D:
    """
    Oriented 3D box in the lidar frame.

    The yaw is normalized to (-pi, pi] at construction, so two boxes built
    from yaw and yaw + 2*pi compare equal.
    """

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0
    class_id: int = CAR

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Box3D.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"Box3D dimensions must be positive, got "
                f"({self.length}, {self.width}, {self.height})"
            )
        if int(self.class_id) < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values: Sequence[float], class_id: int = CAR) -> "Box3D":
        if len(values) != BOX_DIM:
            raise ValueError(f"box array must have {BOX_DIM} values, got {len(values)}")
        return cls(*(float(v) for v in values), class_id=class_id)

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_range(self) -> Tuple[float, float]:
        return self.cz - self.height / 2.0, self.cz + self.height / 2.0

    def rotated(self, angle: float, center: Tuple[float, float] = (0.0, 0.0)) -> "Box3D":
        """Rotate the box pose about a vertical axis through ``center``."""
        c, s = math.cos(angle), math.sin(angle)
        dx, dy = self.cx - center[0], self.cy - center[1]
        return Box3D(
            center[0] + c * dx - s * dy,
            center[1] + s * dx + c * dy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.yaw + angle,
            self.class_id,
        )

    def mirrored_y(self, axis: float = 0.0) -> "Box3D":
        """Mirror the box across the line y = axis."""
        return Box3D(
            self.cx,
            2.0 * axis - self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            -self.yaw,
            self.class_id,
        )


def boxes_array(boxes: Iterable[Box3D]) -> np.ndarray:
    """Stack boxes into a (N, 7) float64 array."""
    rows = [box.to_array() for box in boxes]
    if not rows:
        return np.zeros((0, BOX_DIM), dtype=np.float64)
    return np.stack(rows)


@dataclass(frozen=True)
class Detection:
    """A scored box as produced by the detection head."""

    box: Box3D
    cls_conf: float
    iou_conf: float

    def __post_init__(self):
        for name in ("cls_conf", "iou_conf"):
            value = float(getattr(self, name))
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"Detection.{name} must be in [0, 1], got {value}")
            object.__setattr__(self, name, value)


def box_corners_bev(box: Box3D) -> np.ndarray:
    """
    Corners of the box footprint.

    Returns:
        (4, 2) array, counter-clockwise, starting from (+l/2, +w/2) in box frame
    """
    return corners_bev_array(box.to_array()[None, :])[0]


def corners_bev_array(boxes: np.ndarray) -> np.ndarray:
    """Vectorized footprint corners for a (N, 7) box array, shape (N, 4, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    half_l = boxes[:, 3] / 2.0
    half_w = boxes[:, 4] / 2.0
    local_x = np.stack([half_l, -half_l, -half_l, half_l], axis=1)
    local_y = np.stack([half_w, half_w, -half_w, -half_w], axis=1)
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    xs = boxes[:, 0:1] + c * local_x - s * local_y
    ys = boxes[:, 1:2] + s * local_x + c * local_y
    return np.stack([xs, ys], axis=-1)


def to_box_frame(points: PointsLike, box: Box3D) -> np.ndarray:
    """Express points (first three columns) in the box frame, shape (N, 3)."""
    pts = points_array(points)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    local = np.empty((pts.shape[0], 3), dtype=np.float64)
    local[:, 0] = c * dx + s * dy
    local[:, 1] = -s * dx + c * dy
    local[:, 2] = pts[:, 2] - box.cz
    return local


def points_in_box(points: PointsLike, box: Box3D) -> np.ndarray:
    """
    Boolean mask of points inside the box, boundary inclusive.

    Args:
        points: Point cloud
        box: Query box

    Returns:
        (N,) boolean array
    """
    local = to_box_frame(points, box)
    return (
        (np.abs(local[:, 0]) <= box.length / 2.0)
        & (np.abs(local[:, 1]) <= box.width / 2.0)
        & (np.abs(local[:, 2]) <= box.height / 2.0)
    )


def rotate_points_z(
    points: PointsLike, angle: float, center: Tuple[float, float] = (0.0, 0.0)
) -> np.ndarray:
    """Rotate points about a vertical axis through ``center``; intensity is kept."""
    pts = points_array(points).copy()
    c, s = math.cos(angle), math.sin(angle)
    dx = pts[:, 0] - center[0]
    dy = pts[:, 1] - center[1]
    pts[:, 0] = center[0] + c * dx - s * dy
    pts[:, 1] = center[1] + s * dx + c * dy
    return pts
