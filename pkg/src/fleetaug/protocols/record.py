"""Declarative binary records with scalar, static and numpy-array fields."""

import struct
from abc import ABC
from enum import Enum
from typing import Any, Callable, Dict, Tuple, Type, Union

import numpy as np

from fleetaug.protocols.errors import (
    FieldRangeError,
    LengthMismatchError,
    PayloadError,
    StaticFieldError,
)


class Encoding(Enum):
    """Byte order encodings."""

    LITTLE_ENDIAN = "little"
    BIG_ENDIAN = "big"


DtypeSpec = Union[np.dtype, str, Callable[["BinaryRecord"], np.dtype]]


class BinaryRecord(ABC):
    """
    Base class for fixed-layout binary records.

    Subclasses declare ``fields`` in wire order. Field specification options:
    - type: "uint(N)" / "int(N)" for N in 8, 16, 32, 64; "float" (32-bit);
      "double"; "bytes(N)" for a fixed-size byte string; "records" for a
      numpy array
    - static: Constant value; always written, and checked when decoding
    - error: StaticFieldError subclass raised on a static mismatch
    - max: Largest value an integer field may decode to
    - dtype: For "records", a numpy dtype or a callable taking the partially
      decoded record (earlier fields are set) and returning one
    - numlist: For "records", the element count, either an int or the name
      of an earlier integer field

    Examples:
        class Header(BinaryRecord):
            encoding = Encoding.LITTLE_ENDIAN
            fields = {
                "magic": {"type": "bytes(4)", "static": b"ABCD"},
                "count": {"type": "uint(32)"},
                "items": {"type": "records", "dtype": "<f4", "numlist": "count"},
            }
    """

    encoding: Encoding = Encoding.LITTLE_ENDIAN
    fields: Dict[str, Dict[str, Any]] = {}

    def __init__(self, **kwargs):
        """Initialize with field values; static fields always take their constant."""
        for field_name, field_spec in self.fields.items():
            if "static" in field_spec:
                setattr(self, field_name, field_spec["static"])
            else:
                setattr(self, field_name, kwargs.get(field_name))

    def __eq__(self, other) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        for field_name in self.fields:
            mine, theirs = getattr(self, field_name), getattr(other, field_name)
            if isinstance(mine, np.ndarray) or isinstance(theirs, np.ndarray):
                if not np.array_equal(np.asarray(mine), np.asarray(theirs)):
                    return False
            elif mine != theirs:
                return False
        return True

    __hash__ = None

    def __repr__(self) -> str:
        parts = []
        for field_name in self.fields:
            value = getattr(self, field_name)
            if isinstance(value, np.ndarray):
                value = f"<{value.shape[0]} records>"
            parts.append(f"{field_name}={value!r}")
        return f"{type(self).__name__}({', '.join(parts)})"

    def _resolve_field_reference(self, field_ref: Union[int, str]) -> int:
        """Resolve an element count given literally or as an earlier field name."""
        if isinstance(field_ref, int):
            return field_ref
        if field_ref not in self.fields:
            raise ValueError(f"Referenced field '{field_ref}' does not exist")
        value = getattr(self, field_ref)
        if not isinstance(value, int):
            raise ValueError(f"Referenced field '{field_ref}' is not an integer: {value!r}")
        return value

    def _resolve_dtype(self, field_spec: Dict[str, Any]) -> np.dtype:
        dtype = field_spec["dtype"]
        if callable(dtype) and not isinstance(dtype, (np.dtype, type)):
            dtype = dtype(self)
        return np.dtype(dtype)

    @staticmethod
    def _int_layout(field_type: str) -> Tuple[int, bool]:
        signed = field_type.startswith("int(")
        bits = int(field_type[4 if signed else 5 : -1])
        if bits not in (8, 16, 32, 64):
            raise ValueError(f"Unsupported integer width: {bits}")
        return bits // 8, signed

    def serialize_bytes(self) -> bytes:
        """
        Serialize this record to bytes based on field definitions.

        Returns:
            Byte representation
        """
        byteorder = self.encoding.value
        chunks = []
        for field_name, field_spec in self.fields.items():
            value = getattr(self, field_name)
            field_type = field_spec["type"]
            if value is None:
                raise ValueError(f"Field '{field_name}' has no value")

            if field_type == "records":
                dtype = self._resolve_dtype(field_spec)
                count = self._resolve_field_reference(field_spec["numlist"])
                array = np.ascontiguousarray(value, dtype=dtype)
                if array.shape != (count,):
                    raise ValueError(
                        f"{field_name} must have {count} records, got shape {array.shape}"
                    )
                chunks.append(array.tobytes())
            elif field_type.startswith(("int(", "uint(")):
                size, signed = self._int_layout(field_type)
                chunks.append(int(value).to_bytes(size, byteorder, signed=signed))
            elif field_type.startswith("bytes("):
                size = int(field_type[6:-1])
                if len(value) != size:
                    raise ValueError(f"{field_name} must be {size} bytes, got {len(value)}")
                chunks.append(bytes(value))
            elif field_type in ("float", "double"):
                fmt = ("<" if byteorder == "little" else ">") + ("f" if field_type == "float" else "d")
                chunks.append(struct.pack(fmt, value))
            else:
                raise ValueError(f"Unsupported type: {field_type}")
        return b"".join(chunks)

    @classmethod
    def deserialize_bytes(cls, data: bytes, offset: int = 0) -> Tuple["BinaryRecord", int]:
        """
        Deserialize a record starting at ``offset``.

        Args:
            data: Buffer to read
            offset: Absolute position of the record in ``data``

        Returns:
            Tuple of (record instance, bytes consumed)

        Raises:
            LengthMismatchError: If the buffer ends before the record does
            StaticFieldError: If a static field holds another value
            FieldRangeError: If an integer field exceeds its declared maximum
            PayloadError: If a records layout cannot be built from decoded fields
        """
        byteorder = cls.encoding.value
        instance = cls.__new__(cls)
        position = offset

        def take(size: int, what: str) -> bytes:
            nonlocal position
            available = len(data) - position
            if available < size:
                raise LengthMismatchError(
                    f"Insufficient data for {cls.__name__}.{what}: need {size}, got {available}",
                    position,
                )
            chunk = bytes(data[position : position + size])
            position += size
            return chunk

        for field_name, field_spec in cls.fields.items():
            field_type = field_spec["type"]
            start = position
            if field_type == "records":
                try:
                    dtype = instance._resolve_dtype(field_spec)
                except (ValueError, TypeError, OverflowError) as exc:
                    raise PayloadError(
                        f"{cls.__name__}.{field_name}: bad record layout at byte offset {start}: {exc}"
                    ) from None
                count = instance._resolve_field_reference(field_spec["numlist"])
                needed = count * dtype.itemsize
                available = len(data) - position
                if available < needed:
                    raise LengthMismatchError(
                        f"{cls.__name__}.{field_name} declares {count} records "
                        f"({needed} bytes) but only {available} bytes remain",
                        position,
                    )
                value = np.frombuffer(data, dtype=dtype, count=count, offset=position).copy()
                position += needed
            elif field_type.startswith(("int(", "uint(")):
                size, signed = cls._int_layout(field_type)
                value = int.from_bytes(take(size, field_name), byteorder, signed=signed)
                limit = field_spec.get("max")
                if limit is not None and value > limit:
                    raise FieldRangeError(field_name, limit, value, start)
            elif field_type.startswith("bytes("):
                value = take(int(field_type[6:-1]), field_name)
            elif field_type in ("float", "double"):
                size = 4 if field_type == "float" else 8
                fmt = ("<" if byteorder == "little" else ">") + ("f" if size == 4 else "d")
                value = struct.unpack(fmt, take(size, field_name))[0]
            else:
                raise ValueError(f"Unsupported type: {field_type}")

            if "static" in field_spec and value != field_spec["static"]:
                error: Type[StaticFieldError] = field_spec.get("error", StaticFieldError)
                raise error(field_name, field_spec["static"], value, start)
            setattr(instance, field_name, value)

        return instance, position - offset
