"""Unit tests for protocols.protocol module."""

import logging
import struct

import pytest

from fleetaug.features import BevFeature, GridSpec
from fleetaug.protocols import (
    BadMagicError,
    FeaturePayload,
    FieldRangeError,
    InvalidPayload,
    LengthMismatchError,
    PayloadError,
    PayloadProtocol,
    encode_payload,
)
from fleetaug.protocols.payload import MAX_CHANNELS


@pytest.fixture
def protocol(grid):
    return PayloadProtocol(grid)


@pytest.fixture
def payload(grid):
    return FeaturePayload(BevFeature.from_cells(grid, 2, {(1, 1): [0.5, 1.0]}), [], scene_id=99)


class TestPayloadProtocol:
    """Test suite for PayloadProtocol."""

    def test_initialization(self, grid):
        """Test the protocol keeps its grid."""
        assert PayloadProtocol(grid).spec == grid

    def test_round_trip(self, protocol, payload):
        """Test encode then decode returns an equal payload."""
        assert protocol.decode(protocol.encode(payload)) == payload

    def test_encode_other_grid_raises(self, payload):
        """Test encoding a feature from another grid raises ValueError."""
        with pytest.raises(ValueError, match="different grid"):
            PayloadProtocol(GridSpec()).encode(payload)

    def test_decode_invalid_returns_wrapper(self, protocol):
        """Test garbage decodes to InvalidPayload instead of raising."""
        result = protocol.decode(b"garbage")
        assert isinstance(result, InvalidPayload)
        assert result.raw_data == b"garbage"
        assert result.scene_id is None
        assert isinstance(result.error, BadMagicError)

    def test_decode_empty_returns_wrapper(self, protocol):
        """Test empty input decodes to InvalidPayload."""
        result = protocol.decode(b"")
        assert isinstance(result, InvalidPayload)
        assert isinstance(result.error, LengthMismatchError)

    def test_scene_id_recovered_from_header(self, protocol, payload):
        """Test a truncated body keeps the scene id from the header."""
        result = protocol.decode(encode_payload(payload)[:-2])
        assert isinstance(result, InvalidPayload)
        assert result.scene_id == 99
        assert "scene_id=99" in repr(result)

    def test_invalid_payload_logged(self, protocol, caplog):
        """Test undecodable input logs a warning."""
        with caplog.at_level(logging.WARNING, logger="fleetaug.protocols.protocol"):
            protocol.decode(b"UPCY")
        assert "undecodable payload" in caplog.text

    def test_invalid_repr_unknown_scene(self):
        """Test repr of an InvalidPayload without a scene id."""
        invalid = InvalidPayload(b"\x00" * 3, ValueError("bad"))
        assert repr(invalid) == "InvalidPayload(scene_id=unknown, error=ValueError, raw_bytes=3)"


def header(kind=0, scene_id=7):
    return b"UPCY" + struct.pack("<HBQ", 1, kind, scene_id)


def grid_block(grid, channels, cells=()):
    data = struct.pack("<IIII", grid.height, grid.width, channels, len(cells))
    for row, col in cells:
        data += struct.pack("<II", row, col) + struct.pack(f"<{channels}f", *([1.0] * channels))
    return data


def set_block(n, d):
    return struct.pack("<II", n, d) + b"\x00" * (n * (3 + d) * 4 if d <= MAX_CHANNELS else 0)


NO_DETECTIONS = struct.pack("<I", 0)


class TestHostileHeaders:
    """Test header values that must not escape the InvalidPayload wrapper."""

    def test_oversized_set_dim(self, grid):
        """Test a set vector width near 2**32 is rejected before any layout is built."""
        data = header(kind=1) + grid_block(grid, 4) + set_block(1, 0xFFFFFFF0) + NO_DETECTIONS
        result = PayloadProtocol(grid).decode(data)
        assert isinstance(result, InvalidPayload)
        assert isinstance(result.error, FieldRangeError)
        assert result.error.field_name == "d"
        assert result.scene_id == 7

    def test_oversized_grid_channels(self, grid):
        """Test a huge channel count with no cells is rejected without allocating."""
        data = header() + grid_block(grid, 1 << 24) + NO_DETECTIONS
        result = PayloadProtocol(grid).decode(data)
        assert isinstance(result, InvalidPayload)
        assert isinstance(result.error, FieldRangeError)
        assert result.error.offset == 15 + 8

    def test_channel_mismatch(self, grid):
        """Test a well-formed grid with the wrong channel count is invalid."""
        data = header() + grid_block(grid, 3, [(0, 0)]) + NO_DETECTIONS
        assert PayloadProtocol(grid).decode(data).feature.channels == 3
        result = PayloadProtocol(grid, channels=16).decode(data)
        assert isinstance(result, InvalidPayload)
        assert isinstance(result.error, PayloadError)
        assert "expected 16" in str(result.error)

    def test_set_channel_mismatch(self, grid):
        """Test set vectors must have the expected channel count too."""
        data = header(kind=1) + grid_block(grid, 4) + set_block(2, 3) + NO_DETECTIONS
        result = PayloadProtocol(grid, channels=4).decode(data)
        assert isinstance(result, InvalidPayload)
        assert "set vectors have 3 channels" in str(result.error)

    def test_matching_channels_decode(self, grid):
        """Test the expected channel count accepts a matching payload."""
        data = header(kind=1) + grid_block(grid, 4, [(2, 3)]) + set_block(2, 4) + NO_DETECTIONS
        result = PayloadProtocol(grid, channels=4).decode(data)
        assert isinstance(result, FeaturePayload)
        assert result.set_feature.d == 4

    def test_encode_channel_mismatch(self, grid, payload):
        """Test encoding a feature with other channels raises ValueError."""
        with pytest.raises(ValueError, match="channels"):
            PayloadProtocol(grid, channels=16).encode(payload)
