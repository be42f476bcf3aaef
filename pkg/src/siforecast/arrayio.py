"""Binary array files and text manifests.

Array file layout (all integers little-endian)::

    offset  size      field
    0       8         magic b"SIFARR\\x00\\x01"
    8       4         uint32 format version (1)
    12      4         uint32 ndim
    16      8*ndim    uint64 shape, C order
    ...     8*prod    float64 data, little-endian, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"SIFARR\x00\x01"
ARRAY_VERSION = 1


class FormatError(ValueError):
    pass


def write_array(path, arr) -> None:
    arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
    header = ARRAY_MAGIC + struct.pack("<II", ARRAY_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != ARRAY_MAGIC:
        raise FormatError(f"{path}: not an array file")
    version, ndim = struct.unpack_from("<II", raw, 8)
    if version != ARRAY_VERSION:
        raise FormatError(f"{path}: unsupported array format version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 16)
    offset = 16 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != offset + 8 * count:
        raise FormatError(f"{path}: truncated or oversized payload")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)


def write_csv(path, arr, header=None) -> None:
    arr = np.asarray(arr, dtype=float)
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        if arr.size == 0:
            return
        for row in np.atleast_2d(arr):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
