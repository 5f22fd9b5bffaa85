"""Shared primitives for the package's binary artifact formats.

Every artifact is: magic bytes, a little-endian uint32 format version, a
format-specific header, then length-prefixed tensor blocks (float64, little
endian, C order).  Writers build a list of byte chunks; readers walk a
buffer and raise FormatError on any truncation or mismatch.
"""

import struct

import numpy as np

from .errors import DataIOError, FormatError


def write_str(chunks: list, text: str) -> None:
    raw = text.encode("utf-8")
    chunks.append(struct.pack("<I", len(raw)))
    chunks.append(raw)


def write_tensors(chunks: list, tensors: list) -> None:
    chunks.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        t = np.asarray(t, dtype=np.float64)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}q", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())


def write_file(path, chunks: list) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


class Reader:
    """Cursor over a byte buffer with typed, bounds-checked reads."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError("binary artifact truncated")
        piece = self.blob[self.pos:self.pos + count]
        self.pos += count
        return piece

    def expect_magic(self, magic: bytes, version: int) -> None:
        if self.take(len(magic)) != magic:
            raise FormatError("unrecognized file magic")
        found = self.u32()
        if found != version:
            raise FormatError(f"unsupported format version {found}")

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensors(self) -> list:
        count = self.u32()
        out = []
        for _ in range(count):
            ndim = self.u32()
            shape = struct.unpack(f"<{ndim}q", self.take(8 * ndim))
            size = 1
            for s in shape:
                size *= s
            data = np.frombuffer(self.take(8 * size), dtype="<f8")
            out.append(data.reshape(shape).astype(np.float64))
        return out

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError("trailing bytes after artifact payload")
