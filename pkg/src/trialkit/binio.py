"""Low-level helpers for the versioned binary artifact files.

All integers are little-endian unsigned. Strings are u32-length-prefixed
UTF-8. Readers track their byte offset so corruption errors can say where
parsing failed.
"""

from __future__ import annotations

import struct
from pathlib import Path


class FormatError(ValueError):
    """Corrupt, truncated, or wrong-version artifact file."""


class Reader:
    def __init__(self, data: bytes, where: str = "file"):
        self.data = data
        self.offset = 0
        self.where = where

    def fail(self, message: str) -> "FormatError":
        return FormatError(f"{self.where}: {message} at byte {self.offset}")

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise self.fail(f"truncated: wanted {n} bytes, "
                            f"{len(self.data) - self.offset} left")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.fail(f"invalid UTF-8 string ({exc.reason})") from exc

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.where}: bad magic {got!r}, expected {magic!r} at byte 0")

    def expect_version(self, version: int) -> None:
        got = self.u32()
        if got != version:
            raise FormatError(f"{self.where}: unsupported format version {got} "
                              f"(expected {version})")

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise self.fail(f"trailing data: {len(self.data) - self.offset} extra bytes")


class Writer:
    def __init__(self) -> None:
        self.chunks: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self.chunks.append(data)

    def u32(self, value: int) -> None:
        self.raw(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self.raw(struct.pack("<Q", value))

    def f64(self, value: float) -> None:
        self.raw(struct.pack("<d", value))

    def string(self, value: str) -> None:
        data = value.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def tobytes(self) -> bytes:
        return b"".join(self.chunks)


def read_file(path: str | Path) -> Reader:
    path = Path(path)
    return Reader(path.read_bytes(), where=str(path))


def write_file(path: str | Path, writer: Writer) -> None:
    Path(path).write_bytes(writer.tobytes())
