"""Checkpoint container.

Layout (little-endian)::

    b"GDPC" | u32 version | u32 header_len | header JSON (utf-8) | blob bytes

The header carries arbitrary metadata plus a ``blobs`` table listing each
named array's dtype, shape, byte offset into the blob area, length and CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GDPC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptBlobError(CheckpointError):
    pass


def save_checkpoint(path, header: dict, blobs: dict[str, np.ndarray], keep_float64=()) -> None:
    """Write ``blobs`` (name -> array) in order as float32, except names in ``keep_float64``."""
    table = []
    chunks = []
    offset = 0
    for name, arr in blobs.items():
        a = np.asarray(arr)
        code = "f8" if name in keep_float64 else "f4"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["format_version"] = VERSION
    full["blobs"] = table
    text = json.dumps(full, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size or data[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptBlobError(f"{path}: header truncated")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBlobError(f"{path}: unreadable header ({exc})") from None
    base = start + hlen
    blobs = {}
    for entry in header["blobs"]:
        lo = base + entry["offset"]
        raw = data[lo : lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CorruptBlobError(f"{path}: corrupt blob {entry['name']!r} (truncated)")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CorruptBlobError(f"{path}: corrupt blob {entry['name']!r} (checksum mismatch)")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        blobs[entry["name"]] = arr.astype(np.float64 if entry["dtype"] == "f8" else np.float32)
    expected_end = base + sum(e["nbytes"] for e in header["blobs"])
    if len(data) != expected_end:
        raise CorruptBlobError(f"{path}: {len(data) - expected_end} trailing bytes after last blob")
    return header, blobs
