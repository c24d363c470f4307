"""Reading point clouds and labels from disk."""

import logging
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np

from fleetaug.geometry.boxes import CLASS_NAMES, Box3D, Detection
from fleetaug.protocols.errors import LabelFormatError, TruncatedFileError

logger = logging.getLogger(__name__)

POINT_STRIDE = 16  # x, y, z, intensity as little-endian float32

PathLike = Union[str, Path]


def read_points_bin(path: PathLike) -> np.ndarray:
    """
    Read a flat float32 (x, y, z, intensity) point file.

    Returns:
        (N, 4) float64 array

    Raises:
        TruncatedFileError: If the file length is not a multiple of 16
    """
    data = Path(path).read_bytes()
    tail = len(data) % POINT_STRIDE
    if tail:
        offset = len(data) - tail
        raise TruncatedFileError(
            f"{path}: {tail} bytes left over after the last complete point", offset
        )
    points = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{path}: non-finite point values")
    return points


def write_points_bin(path: PathLike, points: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(points, dtype="<f4").reshape(-1, 4).tobytes())


def parse_labels(lines: Iterable[str]) -> Tuple[List[Box3D], int]:
    """
    Parse "class cx cy cz l w h yaw" lines in the lidar frame.

    Blank lines are ignored. Lines with a class outside CLASS_NAMES are
    skipped and counted.

    Returns:
        (boxes, number of skipped unknown-class lines)

    Raises:
        LabelFormatError: On a line with the wrong arity or invalid numbers
    """
    boxes: List[Box3D] = []
    unknown = 0
    for number, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 8:
            raise LabelFormatError(f"expected 8 fields, got {len(tokens)}", number)
        if tokens[0] not in CLASS_NAMES:
            unknown += 1
            continue
        try:
            values = [float(token) for token in tokens[1:]]
            boxes.append(Box3D(*values, class_id=CLASS_NAMES.index(tokens[0])))
        except ValueError as exc:
            raise LabelFormatError(str(exc), number) from exc
    return boxes, unknown


def read_labels_txt(path: PathLike) -> List[Box3D]:
    """Read a label file; unknown classes are skipped with one warning."""
    with open(path, "r", encoding="utf-8") as handle:
        boxes, unknown = parse_labels(handle)
    if unknown:
        logger.warning("%s: skipped %d labels with unknown class", path, unknown)
    return boxes


def format_labels(boxes: Iterable[Box3D]) -> str:
    """Inverse of :func:`parse_labels` for known classes."""
    lines = []
    for box in boxes:
        values = " ".join(repr(v) for v in box.to_array().tolist())
        lines.append(f"{CLASS_NAMES[box.class_id]} {values}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(lines: Iterable[str]) -> Tuple[List[Detection], int]:
    """
    Parse "class cx cy cz l w h yaw cls_conf [iou_conf]" lines.

    A missing iou_conf reads as 1.0. Unknown classes are skipped and counted
    as in :func:`parse_labels`.

    Raises:
        LabelFormatError: On a line with the wrong arity or invalid values
    """
    detections: List[Detection] = []
    unknown = 0
    for number, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) not in (9, 10):
            raise LabelFormatError(f"expected 9 or 10 fields, got {len(tokens)}", number)
        if tokens[0] not in CLASS_NAMES:
            unknown += 1
            continue
        try:
            values = [float(token) for token in tokens[1:]]
            box = Box3D(*values[:7], class_id=CLASS_NAMES.index(tokens[0]))
            iou_conf = values[8] if len(values) == 9 else 1.0
            detections.append(Detection(box, values[7], iou_conf))
        except ValueError as exc:
            raise LabelFormatError(str(exc), number) from exc
    return detections, unknown


def read_detections_txt(path: PathLike) -> List[Detection]:
    with open(path, "r", encoding="utf-8") as handle:
        detections, unknown = parse_detections(handle)
    if unknown:
        logger.warning("%s: skipped %d detections with unknown class", path, unknown)
    return detections


def format_detections(detections: Iterable[Detection]) -> str:
    lines = []
    for det in detections:
        values = " ".join(repr(v) for v in det.box.to_array().tolist())
        lines.append(f"{CLASS_NAMES[det.box.class_id]} {values} {det.cls_conf!r} {det.iou_conf!r}")
    return "\n".join(lines) + ("\n" if lines else "")
