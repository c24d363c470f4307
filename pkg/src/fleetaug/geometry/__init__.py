"""Oriented-box and point-cloud primitives."""

from fleetaug.geometry.boxes import (
    CAR,
    CLASS_NAMES,
    Box3D,
    Detection,
    Point3,
    box_corners_bev,
    boxes_array,
    corners_bev_array,
    normalize_yaw,
    points_array,
    points_in_box,
    rotate_points_z,
    to_box_frame,
)
from fleetaug.geometry.iou import (
    clip_polygon,
    iou_3d,
    iou_3d_matrix,
    iou_bev,
    iou_bev_matrix,
    polygon_area,
)
from fleetaug.geometry.nms import nms_bev

__all__ = [
    "CAR",
    "CLASS_NAMES",
    "Box3D",
    "Detection",
    "Point3",
    "box_corners_bev",
    "boxes_array",
    "clip_polygon",
    "corners_bev_array",
    "iou_3d",
    "iou_3d_matrix",
    "iou_bev",
    "iou_bev_matrix",
    "nms_bev",
    "normalize_yaw",
    "points_array",
    "points_in_box",
    "polygon_area",
    "rotate_points_z",
    "to_box_frame",
]
