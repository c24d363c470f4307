"""Binary codecs, file formats and ingestion."""

from fleetaug.protocols.errors import (
    BadMagicError,
    BadVersionError,
    FieldRangeError,
    LabelFormatError,
    LengthMismatchError,
    PayloadError,
    StaticFieldError,
    TruncatedFileError,
)
from fleetaug.protocols.ingest import (
    format_detections,
    format_labels,
    parse_detections,
    parse_labels,
    read_detections_txt,
    read_labels_txt,
    read_points_bin,
    write_points_bin,
)
from fleetaug.protocols.payload import (
    FeaturePayload,
    PayloadKind,
    decode_gt_database,
    decode_payload,
    encode_gt_database,
    encode_payload,
    quantize_detection,
)
from fleetaug.protocols.protocol import InvalidPayload, PayloadProtocol
from fleetaug.protocols.record import BinaryRecord, Encoding

__all__ = [
    "BadMagicError",
    "BadVersionError",
    "BinaryRecord",
    "Encoding",
    "FeaturePayload",
    "FieldRangeError",
    "InvalidPayload",
    "LabelFormatError",
    "LengthMismatchError",
    "PayloadError",
    "PayloadKind",
    "PayloadProtocol",
    "StaticFieldError",
    "TruncatedFileError",
    "decode_gt_database",
    "decode_payload",
    "encode_gt_database",
    "encode_payload",
    "format_detections",
    "format_labels",
    "parse_detections",
    "parse_labels",
    "quantize_detection",
    "read_detections_txt",
    "read_labels_txt",
    "read_points_bin",
    "write_points_bin",
]
