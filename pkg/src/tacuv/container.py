"""Shared helpers for the little-endian binary containers.

Every on-disk format in this package follows the same scheme: an ASCII
magic tag, a u64 length-prefixed JSON header, then raw arrays in the order
the header declares. Readers validate the magic and header before touching
array bytes and raise `FormatError` with the offending file named.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

_DTYPES = {"f4": "<f4", "u4": "<u4", "i4": "<i4"}


def write_container(path, magic: bytes, header: dict, arrays) -> None:
    """`arrays` is a list of (numpy array, dtype tag) matching header['fields']."""
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr, tag in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_container(path, magic: bytes):
    """Return (header, payload bytes, payload offset) after validation."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 8 or raw[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode('ascii')!r}")
    off = len(magic)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    return header, raw, off + hlen


def take_array(path, raw: bytes, off: int, shape, tag: str):
    """Slice one declared array out of the payload; returns (array, new offset)."""
    dt = np.dtype(_DTYPES[tag])
    count = int(np.prod(shape)) if len(shape) else 1
    end = off + dt.itemsize * count
    if end > len(raw):
        raise FormatError(f"{path}: truncated payload (wanted {count} x {tag} at {off})")
    arr = np.frombuffer(raw[off:end], dtype=dt).reshape(shape)
    return arr.astype(dt.base.newbyteorder("=")), end
