"""Shared binary-file plumbing: atomic writes, checked reads, and the
error taxonomy for the dataset and checkpoint containers."""

from __future__ import annotations

import os
import struct
import tempfile


class FileFormatError(Exception):
    """Base class for container-format problems."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file in the same directory
    plus an atomic rename, so interrupted runs never leave partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class Reader:
    """Cursor over an in-memory buffer that raises on short reads."""

    def __init__(self, payload: bytes, name: str):
        self._buf = payload
        self._pos = 0
        self._name = name

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise TruncatedFileError(f"{self._name}: truncated file")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(f"{self._name}: bad magic bytes {got!r}")

    def expect_version(self, version: int) -> None:
        got = self.u32()
        if got != version:
            raise BadVersionError(f"{self._name}: unsupported version {got}")

    def at_end(self) -> bool:
        return self._pos == len(self._buf)
