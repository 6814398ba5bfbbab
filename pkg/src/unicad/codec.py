"""Little-endian binary reader/writer shared by the model file formats."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CodecError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes):
        self._parts.append(b)

    def u8(self, v):
        self.raw(struct.pack("<B", v))

    def u32(self, v):
        self.raw(struct.pack("<I", v))

    def u64(self, v):
        self.raw(struct.pack("<Q", v))

    def f32(self, v):
        self.raw(struct.pack("<f", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def array(self, a):
        self.raw(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    """Cursor over a CRC-trailed buffer. The CRC is checked on construction."""

    def __init__(self, data: bytes, magic: bytes, version: int, what: str):
        self.what = what
        if len(data) < len(magic) + 8:
            raise CodecError(f"{what}: file too short ({len(data)} bytes)")
        if data[: len(magic)] != magic:
            raise CodecError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CodecError(f"{what}: CRC mismatch (file corrupt or truncated)")
        self._buf = body
        self._off = len(magic)
        got = self.u32("version")
        if got != version:
            raise CodecError(f"{what}: unsupported version {got}")

    def _take(self, n: int, field: str) -> bytes:
        if self._off + n > len(self._buf):
            raise CodecError(f"{self.what}: truncated while reading {field}")
        b = self._buf[self._off: self._off + n]
        self._off += n
        return b

    def u8(self, field):
        return self._take(1, field)[0]

    def u32(self, field):
        return struct.unpack("<I", self._take(4, field))[0]

    def u64(self, field):
        return struct.unpack("<Q", self._take(8, field))[0]

    def f32(self, field):
        return struct.unpack("<f", self._take(4, field))[0]

    def string(self, field):
        n = self.u32(field + ".length")
        try:
            return self._take(n, field).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"{self.what}: {field} is not valid UTF-8") from exc

    def array(self, shape, field) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        b = self._take(4 * count, field)
        return np.frombuffer(b, dtype="<f4").astype(np.float32).reshape(shape)

    def done(self):
        if self._off != len(self._buf):
            raise CodecError(f"{self.what}: {len(self._buf) - self._off} trailing bytes")
