"""Versioned binary container shared by pool and checkpoint files.

Layout (all integers little-endian)::

    magic          8 bytes
    version        uint32
    header_len     uint64
    header         UTF-8 JSON, header_len bytes
    repeated for each block listed in header["blocks"]:
        count      uint64   number of float64 values
        payload    count * float64 (little-endian)
    crc32          uint32 over every preceding byte

Python's JSON float repr round-trips exactly, so header scalars are
bit-exact as well.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

_LE_F64 = np.dtype("<f8")


def write_container(path, magic: bytes, version: int, header: dict, blocks: list[np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["blocks"] = [list(np.shape(b)) for b in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<I", version), struct.pack("<Q", len(head)), head]
    for b in blocks:
        arr = np.ascontiguousarray(b, dtype=np.float64).astype(_LE_F64, copy=False)
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_container(path, magic: bytes, version: int) -> tuple[dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 + 4 + 8 + 4:
        raise FormatError(f"{path}: file too short")
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    (ver,) = struct.unpack_from("<I", body, 8)
    if ver != version:
        raise FormatError(f"{path}: format version {ver}, expected {version}")
    (hlen,) = struct.unpack_from("<Q", body, 12)
    off = 20
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    off += hlen
    blocks = []
    for shape in header.get("blocks", []):
        if off + 8 > len(body):
            raise FormatError(f"{path}: truncated block table")
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
        if count != int(np.prod(shape, dtype=np.int64)) or off + 8 * count > len(body):
            raise FormatError(f"{path}: block size mismatch")
        arr = np.frombuffer(body, dtype=_LE_F64, count=count, offset=off).astype(np.float64)
        blocks.append(arr.reshape(shape))
        off += 8 * count
    if off != len(body):
        raise FormatError(f"{path}: trailing bytes after last block")
    return header, blocks
