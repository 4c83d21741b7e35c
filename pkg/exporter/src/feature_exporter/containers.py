"""Writer/reader for the binary feature-container format.

Deliberately independent of the inference engine's implementation: the
byte layout is the contract between the two packages, pinned by the
shared fixtures in the repository root.

Layout (little-endian): magic ``RPRI``, version ``u32=1``, array count
``u32``; per array: name length ``u16``, UTF-8 name, dtype ``u8``
(1 = float32, 2 = uint8), ndim ``u8``, dims as ``u64``, raw row-major
payload.
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPRI"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.uint8)}


class ContainerFormatError(ValueError):
    pass


def write_container(path, arrays) -> None:
    """Write named float32/uint8 arrays atomically."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise ContainerFormatError(f"duplicate array name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ContainerFormatError(f"array {name!r}: dtype {arr.dtype} not in format")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path) -> dict:
    """Parse a container into an ordered name -> array dict."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if n > len(data) - pos:
            raise ContainerFormatError(f"file ends inside {what}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise ContainerFormatError("bad magic bytes")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported version {version}")
    arrays: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in arrays:
            raise ContainerFormatError(f"duplicate array name {name!r}")
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _DTYPES:
            raise ContainerFormatError(f"unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dtype = _DTYPES[code]
        payload = take(math.prod(dims) * dtype.itemsize, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(data):
        raise ContainerFormatError("trailing bytes after the last array")
    return arrays


def write_image_container(path, features, mask, class_id=None) -> None:
    """One image's feature map (H, W, C float32) and binary mask (H, W uint8)."""
    arrays = {
        "features": np.asarray(features, dtype=np.float32),
        "mask": np.asarray(mask, dtype=np.uint8),
    }
    if class_id is not None:
        arrays["class_id"] = np.array([class_id], dtype=np.uint8)
    write_container(path, arrays)
