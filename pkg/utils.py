"""
Core utility functions shared by every stage.
Includes the exception hierarchy, little-endian binary reading/writing,
varint coding for posting lists and artifact sniffing.
"""

import os
import struct
from typing import Iterable, List, Tuple

import numpy as np


class PermSearchError(ValueError):
    """Base class for every error raised by the toolkit."""


class ConfigError(PermSearchError):
    """Invalid parameters or parameter combinations (usage error)."""


class DataFormatError(PermSearchError):
    """Corrupt, truncated or mismatched artifact file."""


class InsufficientDataError(PermSearchError):
    """Not enough distinct objects to train or sample from."""


class UnindexableObjectError(PermSearchError):
    """Degenerate (all-zero) VLAD vector that yields no terms."""


class DimensionMismatchError(PermSearchError):
    """Vector shapes that do not agree."""


class IndexStateError(PermSearchError):
    """Index used in the wrong phase (sealed/unsealed) or duplicate ids."""


class MissingVectorError(PermSearchError):
    """A candidate has no stored vector for reordering."""


class MissingResultError(PermSearchError):
    """Ground-truth queries without a result list, or queries without ground truth."""


# ==========================================
# Binary writing
# ==========================================

def pack_u8(value: int) -> bytes:
    return struct.pack("<B", value)


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def pack_string(value: str) -> bytes:
    """u32 length prefix followed by UTF-8 bytes."""
    raw = value.encode("utf-8")
    return pack_u32(len(raw)) + raw


def pack_f32(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_file(path: str, payload: bytes) -> int:
    """Write the whole payload and return the number of bytes written."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


# ==========================================
# Binary reading
# ==========================================

class BinaryReader:
    """Cursor over an in-memory buffer; every short read is a DataFormatError."""

    def __init__(self, data: bytes, source: str = "<buffer>"):
        self.data = data
        self.source = source
        self.pos = 0

    @classmethod
    def from_file(cls, path: str) -> "BinaryReader":
        try:
            with open(path, "rb") as f:
                return cls(f.read(), source=path)
        except OSError as e:
            raise DataFormatError(f"cannot read {path}: {e}") from e

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def read_bytes(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DataFormatError(f"{self.source}: truncated file at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        try:
            return struct.unpack(fmt, self.read_bytes(size))[0]
        except struct.error as e:
            raise DataFormatError(f"{self.source}: {e}") from e

    def read_u8(self) -> int:
        return self._unpack("<B")

    def read_u32(self) -> int:
        return self._unpack("<I")

    def read_u64(self) -> int:
        return self._unpack("<Q")

    def read_string(self) -> str:
        raw = self.read_bytes(self.read_u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataFormatError(f"{self.source}: bad string at byte {self.pos}") from e

    def read_f32(self, count: int) -> np.ndarray:
        raw = self.read_bytes(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)

    def expect_header(self, magic: bytes, version: int) -> int:
        """Check magic and version; returns the version read."""
        found = self.read_bytes(len(magic))
        if found != magic:
            raise DataFormatError(f"{self.source}: bad magic {found!r}, expected {magic!r}")
        found_version = self.read_u32()
        if found_version != version:
            raise DataFormatError(f"{self.source}: unsupported version {found_version} (expected {version})")
        return found_version

    def expect_end(self) -> None:
        if self.remaining():
            raise DataFormatError(f"{self.source}: {self.remaining()} trailing bytes")


def sniff_magic(path: str) -> bytes:
    """First four bytes of a file, used by the `stats` subcommand."""
    with open(path, "rb") as f:
        return f.read(4)


# ==========================================
# Varint coding (protocol-buffer style base 128)
# ==========================================

def varint_encode(int_list: Iterable[int]) -> bytearray:
    b = bytearray()
    for i in int_list:
        if i < 0:
            raise ValueError("varint_encode expects non-negative integers")
        if i == 0:
            b.append(0)
        else:
            while i > 0:
                b.append(i & 0x7f | 0x80)
                i >>= 7
            b[-1] &= 0x7f
    return b


def varint_decode(buf: bytes, source: str = "<buffer>") -> List[int]:
    int_list = []
    num = 0
    shift = 0
    for b in buf:
        num |= (b & 0x7f) << shift
        if b & 0x80:
            shift += 7
        else:
            int_list.append(num)
            num = 0
            shift = 0
    if shift:
        raise DataFormatError(f"{source}: varint stream ends mid-value")
    return int_list


def delta_encode(ordinals: Iterable[int]) -> List[int]:
    """Gaps between ascending ordinals (first value kept as-is)."""
    out = []
    prev = 0
    for o in ordinals:
        out.append(o - prev)
        prev = o
    return out


def delta_decode(gaps: Iterable[int]) -> List[int]:
    out = []
    total = 0
    for g in gaps:
        total += g
        out.append(total)
    return out


def interleave(ordinals: List[int], weights: List[int]) -> List[int]:
    """[gap0, w0, gap1, w1, ...] for one posting list."""
    out = []
    for gap, w in zip(delta_encode(ordinals), weights):
        out.append(gap)
        out.append(w)
    return out


def deinterleave(values: List[int], source: str = "<buffer>") -> Tuple[List[int], List[int]]:
    if len(values) % 2:
        raise DataFormatError(f"{source}: odd number of values in posting list")
    return delta_decode(values[0::2]), values[1::2]
