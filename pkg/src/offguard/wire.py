"""Low-level binary encoding helpers.

Everything on the wire and on disk is little-endian. Readers raise
TruncatedError instead of returning short data, and LengthOverflowError
when a declared length exceeds the configured cap, so callers can always
distinguish "malformed" from "incomplete".
"""

from __future__ import annotations

import struct

from .errors import LengthOverflowError, TruncatedError

MAX_DECLARED_LENGTH = 1 << 28  # 256 MiB cap on any single declared blob


def pack_u8(v: int) -> bytes:
    return struct.pack("<B", v)


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def pack_f32(v: float) -> bytes:
    return struct.pack("<f", v)


def pack_f64(v: float) -> bytes:
    return struct.pack("<d", v)


class Reader:
    """Cursor over a bytes object with strict bounds checking."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or n > MAX_DECLARED_LENGTH:
            raise LengthOverflowError(f"refusing to read {n} bytes")
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def expect_end(self) -> None:
        from .errors import TrailingBytesError

        if self.pos != len(self.buf):
            raise TrailingBytesError(f"{len(self.buf) - self.pos} unconsumed bytes")
