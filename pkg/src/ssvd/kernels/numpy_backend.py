"""Vectorized fallback kernels.

Partial sums are accumulated one (kernel row, kernel column, input channel)
tap at a time in float32, matching the compiled core's loop order exactly,
so both backends produce bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

_ONE = np.float32(1.0)


def gather_bilinear(chans: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear reads from (c, h, w) at float32 positions; OOB taps read 0.

    Returns (c, *px.shape) float32. The four corner contributions are
    combined as ((v00*w00 + v01*w01) + v10*w10) + v11*w11 in float32.
    """
    h, w = chans.shape[1], chans.shape[2]
    x0f = np.floor(px)
    y0f = np.floor(py)
    fx = px - x0f
    fy = py - y0f
    gx = _ONE - fx
    gy = _ONE - fy
    w00 = gx * gy
    w01 = fx * gy
    w10 = gx * fy
    w11 = fx * fy

    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x1 >= 0) & (x1 < w)
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y1 >= 0) & (y1 < h)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y1, 0, h - 1)

    v00 = chans[:, y0c, x0c] * (vy0 & vx0).astype(np.float32)
    v01 = chans[:, y0c, x1c] * (vy0 & vx1).astype(np.float32)
    v10 = chans[:, y1c, x0c] * (vy1 & vx0).astype(np.float32)
    v11 = chans[:, y1c, x1c] * (vy1 & vx1).astype(np.float32)
    return v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11


def conv2d_f32(x, kernel, bias, stride, padding, dilation, oh, ow):
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=np.float32)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.empty((b, cout, oh, ow), dtype=np.float32)
    out[:] = bias.reshape(1, cout, 1, 1)
    for r in range(kh):
        ro = r * dilation
        for c in range(kw):
            co = c * dilation
            win = xp[:, :, ro:ro + (oh - 1) * stride + 1:stride,
                     co:co + (ow - 1) * stride + 1:stride]
            for ci in range(cin):
                out += kernel[:, ci, r, c].reshape(1, cout, 1, 1) * win[:, ci][:, None]
    return out


def warp_f32(feature, flow):
    h, w = feature.shape[2], feature.shape[3]
    xs = np.arange(w, dtype=np.float32)[None, :]
    ys = np.arange(h, dtype=np.float32)[:, None]
    px = xs + flow[0, 0]
    py = ys + flow[0, 1]
    return np.ascontiguousarray(gather_bilinear(feature[0], px, py)[None])


def deform_conv_f32(x, offsets, kernel, bias, stride, padding, dilation, groups, oh, ow):
    cin = x.shape[1]
    cout, _, kh, kw = kernel.shape
    cg = cin // groups
    by = (np.arange(oh, dtype=np.int64) * stride - padding)[:, None]
    bx = (np.arange(ow, dtype=np.int64) * stride - padding)[None, :]
    out = np.empty((1, cout, oh, ow), dtype=np.float32)
    out[:] = bias.reshape(1, cout, 1, 1)
    for r in range(kh):
        for c in range(kw):
            tap = r * kw + c
            sampled = np.empty((cin, oh, ow), dtype=np.float32)
            for g in range(groups):
                ch = 2 * (g * kh * kw + tap)
                py = (by + r * dilation).astype(np.float32) + offsets[0, ch]
                px = (bx + c * dilation).astype(np.float32) + offsets[0, ch + 1]
                sampled[g * cg:(g + 1) * cg] = gather_bilinear(
                    x[0, g * cg:(g + 1) * cg], px, py
                )
            for ci in range(cin):
                out[0] += kernel[:, ci, r, c].reshape(cout, 1, 1) * sampled[ci]
    return out
