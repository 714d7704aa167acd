"""TKWP binary tensor container.

Layout (all little-endian)::

    offset 0   4 bytes  magic "TKWP"
    offset 4   u32      version (1)
    offset 8   u8       dtype (1 = float32)
    offset 9   u8       ndim
    offset 10  u64 * ndim dims
    then       float32 payload, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .types import FlowField, OcclusionMask, TokenGrid, VideoTensor

MAGIC = b"TKWP"
VERSION = 1
DTYPE_F32 = 1
ROLES = ("video", "grid", "flow", "mask")
_ROLE_NDIM = {"video": 4, "grid": 3, "flow": 3, "mask": 2}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(arr) -> bytes:
    a = np.asarray(arr)
    if not 1 <= a.ndim <= 255:
        raise ValueError(f"cannot store a {a.ndim}-D tensor")
    a = np.ascontiguousarray(a, dtype="<f4")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 10:
        raise FormatError(f"header truncated: {len(buf)} bytes", len(buf))
    magic = buf[:4]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, dtype, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", 8)
    if ndim < 1:
        raise FormatError("ndim must be at least 1", 9)
    end = 10 + 8 * ndim
    if len(buf) < end:
        raise FormatError("dims truncated", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, 10)
    count = 1
    for d in dims:
        count *= d
    size = 4 * count
    if len(buf) - end < size:
        raise FormatError(f"payload truncated: need {size} bytes, have {len(buf) - end}", len(buf))
    if len(buf) - end > size:
        raise FormatError(f"{len(buf) - end - size} trailing bytes after payload", end + size)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(dims)


def write_container(path, arr) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    data = encode(arr)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(prefix=".tkwp-", dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def as_role(arr: np.ndarray, role: str):
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    if arr.ndim != _ROLE_NDIM[role]:
        raise FormatError(f"{role} needs a {_ROLE_NDIM[role]}-D tensor, got shape {arr.shape}", 9)
    if role == "video":
        return VideoTensor(arr)
    if role == "grid":
        return TokenGrid(arr)
    if role == "flow":
        if arr.shape[2] != 2:
            raise FormatError(f"flow needs shape (h, w, 2), got {arr.shape}", 10)
        return FlowField.from_array(arr)
    return OcclusionMask(arr)


def to_array(obj) -> np.ndarray:
    if isinstance(obj, (VideoTensor, TokenGrid)):
        return obj.data
    if isinstance(obj, FlowField):
        return obj.to_array()
    if isinstance(obj, OcclusionMask):
        return obj.m
    return np.asarray(obj)


def read_container(path, role: Optional[str] = None):
    """Read a container; with ``role`` the tensor is wrapped in the matching type."""
    with open(path, "rb") as fh:
        arr = decode(fh.read())
    return arr if role is None else as_role(arr, role)
