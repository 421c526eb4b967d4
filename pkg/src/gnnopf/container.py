"""Versioned binary container for datasets and checkpoints.

Layout::

    b"GNNOPF\\x00\\x01"           8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys
    array payloads              little-endian, C order, in header order
    sha256 digest               32 bytes over everything above

The header carries a ``schema`` tag, free-form metadata and an ``arrays`` list
of ``{"name", "dtype", "shape"}`` entries describing the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetError

MAGIC = b"GNNOPF\x00\x01"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def dumps(schema: str, meta: dict, arrays: dict) -> bytes:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "dtype": code, "shape": list(data.shape)})
        blobs.append(data.tobytes())
    header = json.dumps({"schema": schema, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes, schema: str):
    """Return ``(meta, arrays)``; raise :class:`DatasetError` on any mismatch."""
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise DatasetError("not a gnnopf container (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(body):
        raise DatasetError("truncated header")
    try:
        header = json.loads(body[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt header: {exc}") from None
    if header.get("schema") != schema:
        raise DatasetError(f"schema mismatch: expected {schema!r}, found {header.get('schema')!r}")
    offset = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if offset + size > len(body):
            raise DatasetError(f"truncated payload in array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(body, dtype=dtype, count=count,
                                              offset=offset).reshape(entry["shape"]).copy()
        offset += size
    if offset != len(body):
        raise DatasetError("payload size does not match header")
    if hashlib.sha256(body).digest() != digest:
        raise DatasetError("checksum mismatch (file corrupted)")
    return header["meta"], arrays


def write(path, schema: str, meta: dict, arrays: dict) -> None:
    Path(path).write_bytes(dumps(schema, meta, arrays))


def read(path, schema: str):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    return loads(raw, schema)
