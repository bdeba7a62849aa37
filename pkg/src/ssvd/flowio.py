"""Middlebury .flo optical-flow file reader/writer.

Layout: float32 magic 202021.25, int32 width, int32 height, then h*w
interleaved (u, v) float32 pairs, all little-endian, row-major. u is the
horizontal displacement (dx), v the vertical one (dy).
"""

from __future__ import annotations

import numpy as np

FLO_MAGIC = np.float32(202021.25)


def write_flo(path, flow: np.ndarray) -> None:
    """flow: (h, w, 2) float array of (u, v)."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(flow.astype("<f4", copy=False).tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = np.frombuffer(f.read(4), dtype="<f4")
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise ValueError(f"{path}: bad .flo magic {magic}")
        dims = np.frombuffer(f.read(8), dtype="<i4")
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise ValueError(f"{path}: bad .flo dims {dims.tolist()}")
        w, h = int(dims[0]), int(dims[1])
        payload = f.read(2 * w * h * 4)
    if len(payload) != 2 * w * h * 4:
        raise ValueError(f"{path}: truncated .flo payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(h, w, 2)


def flow_to_tensor(flow_hw2: np.ndarray) -> np.ndarray:
    """(h, w, 2) -> (1, 2, h, w) with channel 0 = dx, channel 1 = dy."""
    return np.ascontiguousarray(flow_hw2.transpose(2, 0, 1)[None]).astype(np.float32)


def tensor_to_flow(t: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(t[0].transpose(1, 2, 0)).astype(np.float32)
