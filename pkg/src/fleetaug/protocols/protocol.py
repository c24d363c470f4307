"""Server-side payload decoding that never raises on bad input."""

import logging
from typing import Optional, Union

from fleetaug.features.voxelgrid import GridSpec
from fleetaug.protocols.errors import PayloadError
from fleetaug.protocols.payload import PAYLOAD_MAGIC, FeaturePayload, decode_payload, encode_payload

logger = logging.getLogger(__name__)


class InvalidPayload:
    """
    Wrapper for payloads that failed to decode.

    Preserves the raw buffer along with whatever could be recovered from
    the header.
    """

    def __init__(self, raw_data: bytes, error: Exception, scene_id: Optional[int] = None):
        """
        Initialize InvalidPayload.

        Args:
            raw_data: The raw bytes that failed to parse
            error: The exception raised while parsing
            scene_id: The scene id if the header got that far
        """
        self.raw_data = raw_data
        self.error = error
        self.scene_id = scene_id

    def __repr__(self) -> str:
        scene = f"scene_id={self.scene_id}" if self.scene_id is not None else "scene_id=unknown"
        return (
            f"InvalidPayload({scene}, error={self.error.__class__.__name__}, "
            f"raw_bytes={len(self.raw_data)})"
        )


def _peek_scene_id(data: bytes) -> Optional[int]:
    if len(data) >= 15 and data[:4] == PAYLOAD_MAGIC:
        return int.from_bytes(data[7:15], "little")
    return None


class PayloadProtocol:
    """
    Encoder/decoder bound to the grid and BEV channel count a server trains on.

    Usage:
        protocol = PayloadProtocol(spec, channels=16)
        data = protocol.encode(payload)
        decoded = protocol.decode(data)  # FeaturePayload or InvalidPayload
    """

    def __init__(self, spec: GridSpec, channels: Optional[int] = None):
        self.spec = spec
        self.channels = channels

    def encode(self, payload: FeaturePayload) -> bytes:
        if payload.feature.spec != self.spec:
            raise ValueError("payload feature was computed on a different grid")
        if self.channels is not None and payload.feature.channels != self.channels:
            raise ValueError(
                f"payload feature has {payload.feature.channels} channels, expected {self.channels}"
            )
        return encode_payload(payload)

    def decode(self, data: bytes) -> Union[FeaturePayload, InvalidPayload]:
        try:
            return decode_payload(data, self.spec, self.channels)
        except PayloadError as exc:
            invalid = InvalidPayload(bytes(data), exc, _peek_scene_id(data))
            logger.warning("undecodable payload: %r (%s)", invalid, exc)
            return invalid
