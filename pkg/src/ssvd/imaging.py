"""Binary PPM (P6, 8-bit) frame IO and float/byte conversions."""

from __future__ import annotations

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """img: (h, w, 3) uint8."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 PPM")
    # header: magic, width, height, maxval, single whitespace, then payload
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    img = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if img.size != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return img.reshape(h, w, 3).copy()


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    """(1, 3, h, w) float [0, 1] -> (h, w, 3) uint8 (round-half-even)."""
    x = np.clip(frame[0].transpose(1, 2, 0), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def u8_to_frame(img: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (1, 3, h, w) float32 in [0, 1]."""
    x = img.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])
