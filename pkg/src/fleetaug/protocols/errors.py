"""Decode errors for the binary file formats."""

from typing import Any, Optional


class PayloadError(ValueError):
    """Base class for every binary decode failure."""


class LengthMismatchError(PayloadError):
    """A count or length field disagrees with the bytes actually present."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncatedFileError(LengthMismatchError):
    """A fixed-stride file ends in the middle of a record."""


class FieldRangeError(PayloadError):
    """An integer field decoded to a value above its declared maximum."""

    def __init__(self, field_name: str, limit: int, actual: int, offset: int):
        super().__init__(
            f"Field '{field_name}': value {actual} exceeds maximum {limit} at byte offset {offset}"
        )
        self.field_name = field_name
        self.limit = limit
        self.actual = actual
        self.offset = offset


class StaticFieldError(PayloadError):
    """A field declared with a constant value decoded to something else."""

    def __init__(self, field_name: str, expected: Any, actual: Any, offset: Optional[int] = None):
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(
            f"Field '{field_name}': expected static value {expected!r}, got {actual!r}{where}"
        )
        self.field_name = field_name
        self.expected = expected
        self.actual = actual
        self.offset = offset


class BadMagicError(StaticFieldError):
    pass


class BadVersionError(StaticFieldError):
    pass


class LabelFormatError(ValueError):
    """A label text line could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
