"""Named-tensor archive: a small little-endian binary container.

Layout::

    b"DDTENSR1"  u16 version  u32 count
    count x [u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 ndim,
             ndim x u64 dims, row-major payload]

All integers and payloads are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ddm.exceptions import ArchiveFormatError

MAGIC = b"DDTENSR1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temporary sibling file, then rename it over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(entries: dict) -> bytes:
    """Serialize an ordered ``{name: float array}`` mapping."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise ArchiveFormatError(f"{name!r}: dtype {arr.dtype} not storable (f32/f64 only)")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ArchiveFormatError(f"{name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    """Inverse of :func:`encode`; arrays come back in native byte order."""
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise ArchiveFormatError("bad magic, not a tensor archive")
    try:
        version, count = struct.unpack_from("<HI", view, 8)
        if version != VERSION:
            raise ArchiveFormatError(f"unsupported archive version {version}")
        pos = 14
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", view, pos)
            pos += 2
            if code not in DTYPES:
                raise ArchiveFormatError(f"{name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            dt = DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(view):
                raise ArchiveFormatError(f"{name!r}: payload truncated")
            if name in out:
                raise ArchiveFormatError(f"duplicate entry {name!r}")
            arr = np.frombuffer(view[pos:pos + size], dtype=dt).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="))
            pos += size
    except struct.error as exc:
        raise ArchiveFormatError(f"truncated archive: {exc}") from None
    if pos != len(view):
        raise ArchiveFormatError(f"{len(view) - pos} trailing bytes")
    return out


def write_archive(path, entries: dict) -> None:
    atomic_write(path, encode(entries))


def read_archive(path) -> dict:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveFormatError(f"cannot read {path}: {exc}") from None
    return decode(blob)


def text_to_array(text: str) -> np.ndarray:
    """Store text as its UTF-8 bytes in an f32 vector (exact for byte values)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def array_to_text(arr) -> str:
    arr = np.asarray(arr)
    if arr.ndim != 1 or np.any((arr < 0) | (arr > 255) | (arr != np.round(arr))):
        raise ArchiveFormatError("entry is not an encoded text vector")
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def json_entry(obj) -> np.ndarray:
    return text_to_array(json.dumps(obj, sort_keys=True))


def entry_json(arr):
    return json.loads(array_to_text(arr))
