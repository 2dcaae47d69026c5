"""Little-endian binary readers/writers with offset-reporting errors."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Malformed container; message carries the byte offset."""


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []
        self.size = 0

    def raw(self, b: bytes):
        self.parts.append(b)
        self.size += len(b)

    def u32(self, v: int):
        self.raw(struct.pack("<I", v))

    def f32_array(self, arr: np.ndarray):
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def f16_array(self, arr: np.ndarray):
        self.raw(np.ascontiguousarray(arr, dtype="<f2").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _need(self, n: int, what: str):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what} at offset {self.pos} (need {n} bytes, have {len(self.data) - self.pos})")

    def raw(self, n: int, what: str = "bytes") -> bytes:
        self._need(n, what)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self.raw(4, what))[0]

    def f32_array(self, shape, what: str = "f32 array") -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        buf = self.raw(4 * n, what)
        return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

    def f16_array(self, shape, what: str = "f16 array") -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        buf = self.raw(2 * n, what)
        return np.frombuffer(buf, dtype="<f2").astype(np.float64).reshape(shape)

    def expect_magic(self, magic: bytes, kind: str):
        if self.pos != 0:
            raise FormatError(f"magic check must start the stream, at offset {self.pos}")
        got = self.data[: len(magic)]
        if got != magic:
            raise FormatError(f"bad magic at offset 0: expected {magic!r} for {kind}, got {got!r}")
        self.pos = len(magic)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes at offset {self.pos} ({len(self.data) - self.pos} unread)")
