"""Little-endian binary container primitives shared by the persisted artifacts.

Every container starts with a 4-byte magic tag and a ``uint32`` format
version. Integers are fixed width and little-endian; arrays are written raw
with an explicit little-endian dtype so files are portable and byte-stable.
"""
import hashlib
import json
import struct

import numpy as np

from .exceptions import FormatError


class BinaryWriter:
    def __init__(self, fh, magic, version):
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._fh = fh
        fh.write(magic)
        self.u32(version)

    def u8(self, value):
        self._fh.write(struct.pack("<B", value))

    def u32(self, value):
        self._fh.write(struct.pack("<I", value))

    def u64(self, value):
        self._fh.write(struct.pack("<Q", value))

    def array(self, values, dtype):
        self._fh.write(np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes())

    def text(self, value):
        raw = value.encode("utf-8")
        self.u64(len(raw))
        self._fh.write(raw)

    def json(self, obj):
        self.text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


class BinaryReader:
    def __init__(self, fh, magic, supported_versions):
        self._fh = fh
        found = self._read(4)
        if found != magic:
            raise FormatError(f"bad magic {found!r}, expected {magic!r}")
        self.version = self.u32()
        if self.version not in supported_versions:
            raise FormatError(f"unsupported format version {self.version}")

    def _read(self, n):
        raw = self._fh.read(n)
        if len(raw) != n:
            raise FormatError("truncated file")
        return raw

    def u8(self):
        return struct.unpack("<B", self._read(1))[0]

    def u32(self):
        return struct.unpack("<I", self._read(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._read(8))[0]

    def array(self, count, dtype):
        dt = np.dtype(dtype)
        return np.frombuffer(self._read(count * dt.itemsize), dtype=dt).copy()

    def text(self):
        return self._read(self.u64()).decode("utf-8")

    def json(self):
        return json.loads(self.text())

    def expect_eof(self):
        if self._fh.read(1):
            raise FormatError("trailing bytes after payload")


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
