"""Binary checkpoint container.

Layout (little-endian)::

    b"CACT" | u16 version | u32 count | count x entry
    entry = u32 name_len | utf-8 name | u32 ndim | ndim x u64 extent | f64 data (row-major)
"""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"CACT"
VERSION = 1


def dumps(state: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # keeps 0-d shapes
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise ContractError("not a CACT checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 10
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ContractError(f"trailing {len(blob) - pos} bytes in checkpoint")
    return state


def save(path, state: dict) -> str:
    """Write ``state`` and return its sha256 hex digest."""
    blob = dumps(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
