"""Canonical byte layout shared by signatures, hashes and chain files.

Fields are written in declared order. Integers are 8-byte big-endian, byte
strings and text carry a 4-byte big-endian length prefix, prices are IEEE-754
doubles in big-endian bit order.
"""
import hashlib
import struct
from typing import List

from cchp_chain.errors import ChainFormatError

_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Encoder:
    """Append-only canonical writer."""

    def __init__(self):
        self._parts: List[bytes] = []

    def u64(self, value: int) -> "Encoder":
        if value < 0:
            raise ValueError(f"u64 cannot hold {value}")
        self._parts.append(_U64.pack(value))
        return self

    def i64(self, value: int) -> "Encoder":
        self._parts.append(_I64.pack(value))
        return self

    def f64(self, value: float) -> "Encoder":
        self._parts.append(_F64.pack(value))
        return self

    def bytes_(self, value: bytes) -> "Encoder":
        self._parts.append(_U32.pack(len(value)))
        self._parts.append(bytes(value))
        return self

    def text(self, value: str) -> "Encoder":
        return self.bytes_(value.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Decoder:
    """Reader over canonical bytes; any short read raises ChainFormatError."""

    def __init__(self, data: bytes, offset: int = 0):
        self._data = memoryview(data)
        self._offset = offset

    @property
    def offset(self) -> int:
        return self._offset

    def remaining(self) -> int:
        return len(self._data) - self._offset

    def _take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._data):
            raise ChainFormatError(
                f"truncated input: need {size} bytes at offset {self._offset}, "
                f"{self.remaining()} left"
            )
        chunk = self._data[self._offset:end].tobytes()
        self._offset = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def bytes_(self) -> bytes:
        size = _U32.unpack(self._take(4))[0]
        return self._take(size)

    def text(self) -> str:
        raw = self.bytes_()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ChainFormatError(f"invalid utf-8 text at offset {self._offset}: {e}") from e

    def expect_end(self) -> None:
        if self.remaining():
            raise ChainFormatError(f"{self.remaining()} trailing bytes at offset {self._offset}")
