"""Little-endian binary container helpers shared by all file formats.

Every engine file follows the same frame: an 8-byte ASCII magic, a u32
format version, format-specific header fields, a float32 payload, and a
trailing u32-length-prefixed UTF-8 metadata block holding JSON text.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Any, BinaryIO, Iterator

import numpy as np

from .errors import FormatError

MAGIC_LEN = 8


@contextmanager
def open_binary(source: str | Path | BinaryIO, mode: str) -> Iterator[BinaryIO]:
    """Yield a binary stream from a path or pass a file object through."""
    if hasattr(source, "read") or hasattr(source, "write"):
        yield source  # type: ignore[misc]
    else:
        with open(source, mode) as fh:
            yield fh


def read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"truncated {what}: expected {count} bytes, got {len(data)}"
        )
    return data


def check_magic(fh: BinaryIO, magic: bytes) -> None:
    found = read_exact(fh, MAGIC_LEN, "magic")
    if found != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {found!r}")


def check_version(fh: BinaryIO, expected: int) -> None:
    version = read_u32(fh, "format version")
    if version != expected:
        raise FormatError(f"unsupported format version {version}, expected {expected}")


def read_u8(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<B", read_exact(fh, 1, what))[0]


def read_u32(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def read_u64(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<Q", read_exact(fh, 8, what))[0]


def write_u8(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<B", value))


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def read_f32_array(fh: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = read_exact(fh, 4 * count, what)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_f32_array(fh: BinaryIO, array: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_metadata(fh: BinaryIO) -> dict[str, Any]:
    length = read_u32(fh, "metadata length")
    raw = read_exact(fh, length, "metadata")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError("metadata must be a JSON object")
    return meta


def write_metadata(fh: BinaryIO, metadata: dict[str, Any]) -> None:
    raw = json.dumps(metadata, sort_keys=True).encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def check_eof(fh: BinaryIO) -> None:
    extra = fh.read(1)
    if extra:
        raise FormatError("trailing bytes after metadata block")
