"""Dense CPU kernels with two interchangeable backends.

A compiled core (ssvd.kernels._fast, Cython) is preferred when present;
otherwise a vectorized numpy fallback is used. Both accumulate float32
partial sums in the same fixed order (kernel row, kernel column, input
channel), so their outputs are bit-identical and every run of either
backend is deterministic. Select explicitly with SSVD_BACKEND=cython|numpy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, DimensionError
from ..tensorio import require_tensor
from . import numpy_backend

try:
    from . import _fast
except ImportError:
    _fast = None

_env = os.environ.get("SSVD_BACKEND", "auto")
if _env == "cython" and _fast is None:
    raise ImportError("SSVD_BACKEND=cython but the compiled core is not built")
if _env == "numpy":
    _impl = numpy_backend
elif _env in ("auto", "cython"):
    _impl = _fast if _fast is not None else numpy_backend
else:
    raise ConfigurationError(f"unknown SSVD_BACKEND {_env!r}")


def active_backend() -> str:
    return "cython" if _impl is _fast else "numpy"


def available_backends() -> list:
    return ["numpy"] + (["cython"] if _fast is not None else [])


def backend_module(name: str):
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        if _fast is None:
            raise ConfigurationError("compiled backend requested but not built")
        return _fast
    raise ConfigurationError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class ConvSpec:
    """Weights plus geometry for one convolution (cross-correlation).

    kernel is (out_ch, in_ch, kh, kw) float32 with odd kh/kw; bias is
    (out_ch,) float32 and is always applied.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        k = np.ascontiguousarray(self.kernel, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if k.ndim != 4:
            raise DimensionError(f"kernel must be 4-d, got shape {k.shape}")
        if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
            raise ConfigurationError(f"kernel height/width must be odd, got {k.shape[2:]}")
        if b.shape[0] != k.shape[0]:
            raise DimensionError(f"bias shape {b.shape} does not match out_ch {k.shape[0]}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigurationError(
                f"bad geometry stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def out_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel.shape[2], self.kernel.shape[3]
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"conv output would be empty for input {h}x{w} ({oh}x{ow})")
        return oh, ow


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided, zero-padded cross-correlation; output floor-sized."""
    x = require_tensor(x, "conv2d input")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {spec.in_channels} "
            f"(input {x.shape}, kernel {spec.kernel.shape})"
        )
    oh, ow = spec.out_size(x.shape[2], x.shape[3])
    return _impl.conv2d_f32(
        x, spec.kernel, spec.bias, spec.stride, spec.padding, spec.dilation, oh, ow
    )


def bilinear_sample(feature: np.ndarray, points) -> np.ndarray:
    """Sample (x, y) points from a (1, c, h, w) map; returns (n, c) float32.

    Positions are interpreted in pixel units on the map's own grid; each of
    the four neighboring taps that falls outside [0, w-1] x [0, h-1] reads
    as zero, so points far outside the map yield all-zero vectors.
    """
    feature = require_tensor(feature, "bilinear_sample feature")
    if feature.shape[0] != 1:
        raise DimensionError(f"bilinear_sample expects batch 1, got {feature.shape}")
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 2)
    px = np.ascontiguousarray(pts[:, 0])
    py = np.ascontiguousarray(pts[:, 1])
    vals = numpy_backend.gather_bilinear(feature[0], px, py)  # (c, n)
    return np.ascontiguousarray(vals.T)


def warp(feature: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp a (1, c, h, w) map by a (1, 2, h, w) flow (dx, dy).

    out[c, y, x] = bilinear sample of feature[c] at (x + dx[y, x], y + dy[y, x]).
    """
    feature = require_tensor(feature, "warp feature")
    flow = require_tensor(flow, "warp flow")
    if feature.shape[0] != 1 or flow.shape[0] != 1 or flow.shape[1] != 2:
        raise DimensionError(f"warp expects (1,c,h,w) and (1,2,h,w), got {feature.shape} {flow.shape}")
    if feature.shape[2:] != flow.shape[2:]:
        raise DimensionError(
            f"warp: feature spatial {feature.shape[2:]} != flow spatial {flow.shape[2:]}"
        )
    return _impl.warp_f32(feature, flow)


def deform_conv(x: np.ndarray, offsets: np.ndarray, spec: ConvSpec, groups: int) -> np.ndarray:
    """Deformable cross-correlation: per-tap bilinear sampling positions.

    offsets is (1, 2*kh*kw*groups, oh, ow); for offset group g and tap
    (r, c) row-major, channel 2*(g*kh*kw + r*kw + c) holds dy and the next
    channel holds dx. Input channels are split into `groups` equal blocks,
    each following its own offset set. Taps outside the map read as zero.
    """
    x = require_tensor(x, "deform_conv input")
    offsets = require_tensor(offsets, "deform_conv offsets")
    if x.shape[0] != 1:
        raise DimensionError(f"deform_conv expects batch 1, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"deform_conv: input has {x.shape[1]} channels, kernel expects {spec.in_channels}"
        )
    kh, kw = spec.kernel.shape[2], spec.kernel.shape[3]
    if groups < 1 or x.shape[1] % groups != 0:
        raise ConfigurationError(f"groups={groups} must divide input channels {x.shape[1]}")
    want = 2 * kh * kw * groups
    if offsets.shape[1] != want:
        raise ConfigurationError(
            f"deform_conv: offsets have {offsets.shape[1]} channels, "
            f"expected {want} for {kh}x{kw} kernel with groups={groups}"
        )
    oh, ow = spec.out_size(x.shape[2], x.shape[3])
    if offsets.shape[2:] != (oh, ow):
        raise DimensionError(
            f"deform_conv: offsets spatial {offsets.shape[2:]} != output spatial {(oh, ow)}"
        )
    return _impl.deform_conv_f32(
        x, offsets, spec.kernel, spec.bias, spec.stride, spec.padding, spec.dilation,
        groups, oh, ow,
    )


def deform_sampling_locations(offsets: np.ndarray, spec: ConvSpec, groups: int) -> np.ndarray:
    """Per-pixel sampling positions, (groups, kh*kw, oh, ow, 2) as (sx, sy).

    Exactly regular tap position + decoded offset, in float32.
    """
    offsets = require_tensor(offsets, "offsets")
    kh, kw = spec.kernel.shape[2], spec.kernel.shape[3]
    if offsets.shape[1] != 2 * kh * kw * groups:
        raise ConfigurationError(
            f"offsets have {offsets.shape[1]} channels, expected {2 * kh * kw * groups}"
        )
    oh, ow = offsets.shape[2], offsets.shape[3]
    ys = (np.arange(oh, dtype=np.float32) * spec.stride - spec.padding)[:, None]
    xs = (np.arange(ow, dtype=np.float32) * spec.stride - spec.padding)[None, :]
    out = np.empty((groups, kh * kw, oh, ow, 2), dtype=np.float32)
    for g in range(groups):
        for r in range(kh):
            for c in range(kw):
                tap = r * kw + c
                ch = 2 * (g * kh * kw + tap)
                out[g, tap, :, :, 1] = (ys + np.float32(r * spec.dilation)) + offsets[0, ch]
                out[g, tap, :, :, 0] = (xs + np.float32(c * spec.dilation)) + offsets[0, ch + 1]
    return out


def upsample_nearest(x: np.ndarray, factor: int, out_hw: tuple | None = None) -> np.ndarray:
    """Integer-factor nearest upsampling, optionally cropped (bottom/right)."""
    x = require_tensor(x, "upsample input")
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    up = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    if out_hw is not None:
        oh, ow = out_hw
        if oh > up.shape[2] or ow > up.shape[3]:
            raise DimensionError(f"cannot crop upsampled {up.shape[2:]} to larger {out_hw}")
        up = up[:, :, :oh, :ow]
    return np.ascontiguousarray(up)


def concat_channels(parts: list) -> np.ndarray:
    parts = [require_tensor(p, f"concat part {i}") for i, p in enumerate(parts)]
    hw = parts[0].shape[2:]
    for i, p in enumerate(parts):
        if p.shape[2:] != hw or p.shape[0] != parts[0].shape[0]:
            raise DimensionError(f"concat part {i} shape {p.shape} mismatches {parts[0].shape}")
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def mean_stack(parts: list) -> np.ndarray:
    """Mean of equally shaped maps, summed in list order (float32)."""
    if not parts:
        raise ConfigurationError("mean_stack needs at least one contribution")
    parts = [require_tensor(p, f"mean part {i}") for i, p in enumerate(parts)]
    acc = parts[0].copy()
    for p in parts[1:]:
        if p.shape != acc.shape:
            raise DimensionError(f"mean_stack shape {p.shape} mismatches {acc.shape}")
        acc += p
    acc /= np.float32(len(parts))
    return acc


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0.0))
