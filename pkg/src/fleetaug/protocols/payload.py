"""
Wire formats exchanged between vehicles and the server.

PayloadFileV1 (little-endian):
    header      magic "UPCY", u16 version = 1, u8 kind (0 grid, 1 grid+set), u64 scene_id
    grid block  u32 H, u32 W, u32 C, u32 cell_count, then per stored cell
                u32 row, u32 col, C x f32 (row-major order)
    set block   (kind 1 only) u32 n, u32 d, then per point (3 + d) x f32
    detections  u32 count, then per detection 7 x f32 box, u8 class, f32 cls_conf, f32 iou_conf

GtDatabaseFileV1 (little-endian):
    header      magic "UPGT", u16 version = 1, u32 entry count
    per entry   7 x f32 box, u8 class, u32 point count, 4 x f32 per point (box frame)
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fleetaug.augment.gtbank import GtDatabase, GtEntry
from fleetaug.features.backbone import SetFeature
from fleetaug.features.voxelgrid import BevFeature, GridSpec, nonzero_cell_count
from fleetaug.geometry.boxes import Box3D, Detection
from fleetaug.protocols.errors import (
    BadMagicError,
    BadVersionError,
    LengthMismatchError,
    PayloadError,
)
from fleetaug.protocols.record import BinaryRecord, Encoding

logger = logging.getLogger(__name__)

PAYLOAD_MAGIC = b"UPCY"
GTDB_MAGIC = b"UPGT"
FORMAT_VERSION = 1
MAX_CHANNELS = 1024  # per BEV cell and per set keypoint

DETECTION_DTYPE = np.dtype(
    [("box", "<f4", (7,)), ("class_id", "u1"), ("cls_conf", "<f4"), ("iou_conf", "<f4")]
)


def cell_dtype(channels: int) -> np.dtype:
    return np.dtype([("row", "<u4"), ("col", "<u4"), ("values", "<f4", (channels,))])


def point_dtype(dim: int) -> np.dtype:
    return np.dtype([("values", "<f4", (3 + dim,))])


class PayloadKind(IntEnum):
    GRID = 0
    GRID_SET = 1


class PayloadHeader(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "magic": {"type": "bytes(4)", "static": PAYLOAD_MAGIC, "error": BadMagicError},
        "version": {"type": "uint(16)", "static": FORMAT_VERSION, "error": BadVersionError},
        "kind": {"type": "uint(8)"},
        "scene_id": {"type": "uint(64)"},
    }


class GridBlock(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "height": {"type": "uint(32)"},
        "width": {"type": "uint(32)"},
        "channels": {"type": "uint(32)", "max": MAX_CHANNELS},
        "cell_count": {"type": "uint(32)"},
        "cells": {
            "type": "records",
            "dtype": lambda block: cell_dtype(block.channels),
            "numlist": "cell_count",
        },
    }


class SetBlock(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "n": {"type": "uint(32)"},
        "d": {"type": "uint(32)", "max": MAX_CHANNELS},
        "points": {"type": "records", "dtype": lambda block: point_dtype(block.d), "numlist": "n"},
    }


class DetectionBlock(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "count": {"type": "uint(32)"},
        "detections": {"type": "records", "dtype": DETECTION_DTYPE, "numlist": "count"},
    }


class GtDatabaseHeader(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "magic": {"type": "bytes(4)", "static": GTDB_MAGIC, "error": BadMagicError},
        "version": {"type": "uint(16)", "static": FORMAT_VERSION, "error": BadVersionError},
        "count": {"type": "uint(32)"},
    }


class GtEntryRecord(BinaryRecord):
    encoding = Encoding.LITTLE_ENDIAN
    fields = {
        "box": {"type": "records", "dtype": "<f4", "numlist": 7},
        "class_id": {"type": "uint(8)"},
        "npoints": {"type": "uint(32)"},
        "points": {"type": "records", "dtype": np.dtype(("<f4", (4,))), "numlist": "npoints"},
    }


_PI32_HI = np.nextafter(np.float32(np.pi), np.float32(0.0))
_PI32_LO = np.nextafter(np.float32(-np.pi), np.float32(0.0))


def quantize_box(box: Box3D) -> np.ndarray:
    """Box as 7 float32 values; yaw stays strictly inside (-pi, pi)."""
    values = box.to_array().astype(np.float32)
    values[6] = np.clip(values[6], _PI32_LO, _PI32_HI)
    return values


def dequantize_box(values: np.ndarray, class_id: int) -> Box3D:
    return Box3D.from_array([float(v) for v in values], class_id=int(class_id))


def quantize_detection(det: Detection) -> Detection:
    """The detection exactly as it survives a float32 round trip."""
    return Detection(
        dequantize_box(quantize_box(det.box), det.box.class_id),
        float(np.float32(det.cls_conf)),
        float(np.float32(det.iou_conf)),
    )


@dataclass(eq=False)
class FeaturePayload:
    """What one vehicle sends for one scene: its BEV feature and detections."""

    feature: BevFeature
    detections: List[Detection]
    scene_id: int
    set_feature: Optional[SetFeature] = None

    def __post_init__(self):
        if not 0 <= self.scene_id < 2**64:
            raise ValueError(f"scene_id must fit in 64 bits, got {self.scene_id}")
        self.detections = list(self.detections)

    @property
    def kind(self) -> PayloadKind:
        return PayloadKind.GRID if self.set_feature is None else PayloadKind.GRID_SET

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeaturePayload):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.feature == other.feature
            and self.detections == other.detections
            and self.set_feature == other.set_feature
        )

    __hash__ = None


def _grid_block(feature: BevFeature) -> GridBlock:
    rows, cols = np.nonzero(feature.occupied())
    cells = np.empty(rows.size, dtype=cell_dtype(feature.channels))
    cells["row"] = rows
    cells["col"] = cols
    cells["values"] = feature.values[rows, cols]
    return GridBlock(
        height=feature.height,
        width=feature.width,
        channels=feature.channels,
        cell_count=int(rows.size),
        cells=cells,
    )


def _detection_block(dets: Sequence[Detection]) -> DetectionBlock:
    records = np.empty(len(dets), dtype=DETECTION_DTYPE)
    for i, det in enumerate(dets):
        if not 0 <= det.box.class_id < 256:
            raise ValueError(f"class_id {det.box.class_id} does not fit in one byte")
        records[i] = (quantize_box(det.box), det.box.class_id, det.cls_conf, det.iou_conf)
    return DetectionBlock(count=len(dets), detections=records)


def encode_payload(payload: FeaturePayload) -> bytes:
    """Serialize a payload per PayloadFileV1."""
    header = PayloadHeader(kind=int(payload.kind), scene_id=payload.scene_id)
    chunks = [header.serialize_bytes(), _grid_block(payload.feature).serialize_bytes()]
    if payload.set_feature is not None:
        sf = payload.set_feature
        points = np.empty(sf.n, dtype=point_dtype(sf.d))
        points["values"] = np.concatenate([sf.positions, sf.vectors], axis=1)
        chunks.append(SetBlock(n=sf.n, d=sf.d, points=points).serialize_bytes())
    chunks.append(_detection_block(payload.detections).serialize_bytes())
    return b"".join(chunks)


def _decode_feature(block: GridBlock, spec: GridSpec, offset: int) -> BevFeature:
    if (block.height, block.width) != (spec.height, spec.width):
        raise PayloadError(
            f"grid is {block.height}x{block.width}, expected {spec.height}x{spec.width}"
        )
    rows = block.cells["row"].astype(np.int64)
    cols = block.cells["col"].astype(np.int64)
    if rows.size and (rows.max() >= block.height or cols.max() >= block.width):
        raise PayloadError(f"grid cell index out of range in block at byte offset {offset}")
    linear = rows * block.width + cols
    if np.any(np.diff(linear) <= 0):
        raise PayloadError(f"grid cells not in strict row-major order at byte offset {offset}")
    values = np.zeros((block.height, block.width, block.channels), dtype=np.float32)
    values[rows, cols] = block.cells["values"]
    return BevFeature(spec, values)


def decode_payload(data: bytes, spec: GridSpec, channels: Optional[int] = None) -> FeaturePayload:
    """
    Parse a PayloadFileV1 buffer.

    Args:
        data: Encoded payload
        spec: Grid the receiving side expects the feature on
        channels: BEV channel count the receiving side expects; set features
            must match it too. Any count up to MAX_CHANNELS when None.

    Raises:
        BadMagicError: Wrong magic
        BadVersionError: Unsupported version
        LengthMismatchError: A count disagrees with the remaining bytes, or bytes trail
        FieldRangeError: A channel count above MAX_CHANNELS
        PayloadError: Any other structural problem
    """
    header, offset = PayloadHeader.deserialize_bytes(data)
    try:
        kind = PayloadKind(header.kind)
    except ValueError:
        raise PayloadError(f"unknown payload kind {header.kind}") from None

    grid_offset = offset
    grid, used = GridBlock.deserialize_bytes(data, offset)
    offset += used
    if channels is not None and grid.channels != channels:
        raise PayloadError(
            f"grid has {grid.channels} channels, expected {channels} (block at byte offset {grid_offset})"
        )
    feature = _decode_feature(grid, spec, grid_offset)

    set_feature = None
    if kind is PayloadKind.GRID_SET:
        set_offset = offset
        block, used = SetBlock.deserialize_bytes(data, offset)
        offset += used
        if channels is not None and block.d != channels:
            raise PayloadError(
                f"set vectors have {block.d} channels, expected {channels} "
                f"(block at byte offset {set_offset})"
            )
        values = block.points["values"].reshape(block.n, 3 + block.d)
        set_feature = SetFeature(values[:, :3], values[:, 3:])

    block, used = DetectionBlock.deserialize_bytes(data, offset)
    offset += used
    if offset != len(data):
        raise LengthMismatchError(f"{len(data) - offset} trailing bytes after payload", offset)

    detections = []
    for record in block.detections:
        try:
            detections.append(
                Detection(
                    dequantize_box(record["box"], record["class_id"]),
                    float(record["cls_conf"]),
                    float(record["iou_conf"]),
                )
            )
        except ValueError as exc:
            raise PayloadError(f"invalid detection record: {exc}") from exc
    return FeaturePayload(feature, detections, header.scene_id, set_feature)


def encode_gt_database(db: GtDatabase) -> bytes:
    """Serialize a GT database per GtDatabaseFileV1 (values stored as float32)."""
    chunks = [GtDatabaseHeader(count=len(db)).serialize_bytes()]
    for entry in db.entries:
        record = GtEntryRecord(
            box=quantize_box(entry.box),
            class_id=entry.box.class_id,
            npoints=entry.num_points,
            points=entry.local_points.astype(np.float32),
        )
        chunks.append(record.serialize_bytes())
    return b"".join(chunks)


def decode_gt_database(data: bytes) -> GtDatabase:
    """Parse a GtDatabaseFileV1 buffer; source scenes are not stored."""
    header, offset = GtDatabaseHeader.deserialize_bytes(data)
    entries: List[GtEntry] = []
    for _ in range(header.count):
        record, used = GtEntryRecord.deserialize_bytes(data, offset)
        try:
            entries.append(
                GtEntry(
                    dequantize_box(record.box, record.class_id),
                    record.points.astype(np.float64),
                )
            )
        except ValueError as exc:
            raise PayloadError(f"invalid GT entry at byte offset {offset}: {exc}") from exc
        offset += used
    if offset != len(data):
        raise LengthMismatchError(f"{len(data) - offset} trailing bytes after GT database", offset)
    return GtDatabase(tuple(entries))


def payload_sizes(payload: FeaturePayload) -> Tuple[int, int]:
    """(feature bytes, detection bytes) of the encoded payload, header excluded."""
    grid = 16 + nonzero_cell_count(payload.feature) * cell_dtype(payload.feature.channels).itemsize
    if payload.set_feature is not None:
        grid += 8 + payload.set_feature.n * point_dtype(payload.set_feature.d).itemsize
    return grid, 4 + len(payload.detections) * DETECTION_DTYPE.itemsize
