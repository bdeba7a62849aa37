"""Dense map conventions and the TNSR fixture format.

All feature maps are 4-D float32 arrays laid out (batch, channel, height,
width), row-major. TNSR files hold one such array: magic b"TNSR", four
little-endian uint32 dims, then the raw little-endian float32 payload.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .errors import DimensionError

TNSR_MAGIC = b"TNSR"


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float32 (b, c, h, w) array."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 4:
        raise DimensionError(f"expected 4-d (b, c, h, w), got shape {arr.shape}")
    return arr


def require_tensor(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(arr, np.ndarray) or arr.ndim != 4 or arr.dtype != np.float32:
        got = getattr(arr, "shape", type(arr))
        raise DimensionError(f"{name}: expected float32 (b, c, h, w), got {got}")
    if any(d <= 0 for d in arr.shape):
        raise DimensionError(f"{name}: dims must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr)


def assert_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")


def save_tnsr(dest, arr: np.ndarray) -> None:
    """Write one tensor to a path or binary file object."""
    arr = require_tensor(np.asarray(arr, dtype=np.float32).reshape(_as4(arr)))
    if hasattr(dest, "write"):
        _write_tnsr(dest, arr)
    else:
        with open(dest, "wb") as f:
            _write_tnsr(f, arr)


def load_tnsr(src) -> np.ndarray:
    if hasattr(src, "read"):
        return _read_tnsr(src)
    with open(src, "rb") as f:
        return _read_tnsr(f)


def _as4(arr) -> tuple:
    shape = tuple(np.asarray(arr).shape)
    if len(shape) > 4:
        raise DimensionError(f"cannot store {len(shape)}-d array {shape} as TNSR")
    return (1,) * (4 - len(shape)) + shape


def _write_tnsr(f, arr: np.ndarray) -> None:
    f.write(TNSR_MAGIC)
    f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
    f.write(arr.astype("<f4", copy=False).tobytes())


def _read_tnsr(f) -> np.ndarray:
    magic = f.read(4)
    if magic != TNSR_MAGIC:
        raise ValueError(f"bad TNSR magic {magic!r}")
    dims = np.frombuffer(f.read(16), dtype="<u4")
    if dims.size != 4 or np.any(dims == 0):
        raise ValueError(f"bad TNSR dims {dims.tolist()}")
    count = int(np.prod(dims.astype(np.int64)))
    payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise ValueError(f"TNSR truncated: expected {count * 4} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return np.ascontiguousarray(data.reshape(tuple(int(d) for d in dims)))


def tnsr_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    save_tnsr(buf, arr)
    return buf.getvalue()
