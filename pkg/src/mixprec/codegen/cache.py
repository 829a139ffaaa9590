"""Content-addressed store for generated kernel programs.

File layout (little-endian)::

    b"QKCH" | u8 version=1 | records...
    record: 32-byte sha256 | u64 blob length | blob bytes

Records are only ever appended. The index is rebuilt by a linear scan when
the file is opened; a truncated trailing record (interrupted write) is
ignored. Each put rewrites the file to a temporary sibling and renames it
over the original, so readers never observe a partial record.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Union

from .builder import KernelProgram

MAGIC = b"QKCH"
VERSION = 1
_HEADER = MAGIC + bytes([VERSION])
_LEN = struct.Struct("<Q")


class CacheError(Exception):
    pass


def canonicalize(source: str) -> bytes:
    """Whitespace-normalised source, standing in for a device binary."""
    lines = (" ".join(line.split()) for line in source.splitlines())
    return "\n".join(line for line in lines if line).encode("utf-8")


class KernelCache:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._index: dict[bytes, bytes] = {}
        self._size = 0
        if self.path.exists():
            self._load()

    def __len__(self):
        return len(self._index)

    def __contains__(self, key: bytes):
        return key in self._index

    def _load(self):
        try:
            raw = self.path.read_bytes()
        except OSError as exc:
            raise CacheError(f"cannot read kernel cache {self.path}: {exc}") from exc
        if raw[: len(_HEADER)] != _HEADER:
            raise CacheError(f"{self.path} is not a version {VERSION} kernel cache")
        pos = len(_HEADER)
        while pos + 32 + _LEN.size <= len(raw):
            key = raw[pos : pos + 32]
            (n,) = _LEN.unpack_from(raw, pos + 32)
            start = pos + 32 + _LEN.size
            if start + n > len(raw):
                break
            self._index[key] = raw[start : start + n]
            pos = start + n
        self._size = pos

    def get(self, key: bytes) -> Optional[bytes]:
        return self._index.get(bytes(key))

    def put(self, program: Union[KernelProgram, bytes], blob: bytes) -> bool:
        """Store ``blob`` under the program's hash; False if already present."""
        key = program.content_hash if isinstance(program, KernelProgram) else bytes(program)
        if len(key) != 32:
            raise ValueError("cache keys are 32-byte digests")
        if self._index.get(key) == blob:
            return False
        record = key + _LEN.pack(len(blob)) + bytes(blob)
        try:
            existing = self.path.read_bytes()[: self._size] if self.path.exists() else _HEADER
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name + ".")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(existing + record)
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, self.path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise CacheError(f"cannot write kernel cache {self.path}: {exc}") from exc
        self._size = len(existing) + len(record)
        self._index[key] = bytes(blob)
        return True

    def load_or_build(self, program: KernelProgram) -> bytes:
        """Cached blob for ``program``, compiling and storing it on a miss."""
        blob = self.get(program.content_hash)
        if blob is None:
            blob = canonicalize(program.source)
            try:
                self.put(program, blob)
            except CacheError:
                pass  # regeneration is always possible
        return blob
