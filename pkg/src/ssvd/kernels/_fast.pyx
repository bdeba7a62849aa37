# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core.

Float32 partial sums follow the same fixed (kernel row, kernel column,
input channel) order as the numpy fallback; together with -ffp-contract=off
this keeps both backends bit-identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floorf

cnp.import_array()


cdef inline float _bilinear(const float* plane, Py_ssize_t h, Py_ssize_t w,
                            float px, float py) nogil:
    cdef float x0f = floorf(px)
    cdef float y0f = floorf(py)
    cdef float fx = px - x0f
    cdef float fy = py - y0f
    cdef float gx = <float>1.0 - fx
    cdef float gy = <float>1.0 - fy
    cdef float w00 = gx * gy
    cdef float w01 = fx * gy
    cdef float w10 = gx * fy
    cdef float w11 = fx * fy
    cdef Py_ssize_t x0 = <Py_ssize_t>x0f
    cdef Py_ssize_t y0 = <Py_ssize_t>y0f
    cdef Py_ssize_t x1 = x0 + 1
    cdef Py_ssize_t y1 = y0 + 1
    cdef float v00 = plane[y0 * w + x0] if (0 <= x0 < w and 0 <= y0 < h) else <float>0.0
    cdef float v01 = plane[y0 * w + x1] if (0 <= x1 < w and 0 <= y0 < h) else <float>0.0
    cdef float v10 = plane[y1 * w + x0] if (0 <= x0 < w and 0 <= y1 < h) else <float>0.0
    cdef float v11 = plane[y1 * w + x1] if (0 <= x1 < w and 0 <= y1 < h) else <float>0.0
    return ((v00 * w00 + v01 * w01) + v10 * w10) + v11 * w11


def conv2d_f32(cnp.ndarray x_arr, cnp.ndarray kernel_arr, cnp.ndarray bias_arr,
               int stride, int padding, int dilation, int oh_i, int ow_i):
    cdef Py_ssize_t b = x_arr.shape[0]
    cdef Py_ssize_t cin = x_arr.shape[1]
    cdef Py_ssize_t h = x_arr.shape[2]
    cdef Py_ssize_t w = x_arr.shape[3]
    cdef Py_ssize_t cout = kernel_arr.shape[0]
    cdef Py_ssize_t kh = kernel_arr.shape[2]
    cdef Py_ssize_t kw = kernel_arr.shape[3]
    cdef Py_ssize_t oh = oh_i, ow = ow_i
    cdef Py_ssize_t ph = h + 2 * padding, pw = w + 2 * padding

    xp_arr = np.zeros((b, cin, ph, pw), dtype=np.float32)
    xp_arr[:, :, padding:padding + h, padding:padding + w] = x_arr
    out_arr = np.empty((b, cout, oh, ow), dtype=np.float32)

    cdef float[:, :, :, ::1] xp = xp_arr
    cdef float[:, :, :, ::1] out = out_arr
    cdef float[:, :, :, ::1] k = kernel_arr
    cdef float[::1] bias = bias_arr
    cdef Py_ssize_t bi, co, ci, r, c, y, x
    cdef float acc, kk
    cdef const float* plane
    with nogil:
        for bi in range(b):
            for co in range(cout):
                for y in range(oh):
                    for x in range(ow):
                        acc = bias[co]
                        for r in range(kh):
                            for c in range(kw):
                                for ci in range(cin):
                                    acc = acc + k[co, ci, r, c] * xp[
                                        bi, ci, y * stride + r * dilation,
                                        x * stride + c * dilation]
                        out[bi, co, y, x] = acc
    return out_arr


def warp_f32(cnp.ndarray feat_arr, cnp.ndarray flow_arr):
    cdef Py_ssize_t cch = feat_arr.shape[1]
    cdef Py_ssize_t h = feat_arr.shape[2]
    cdef Py_ssize_t w = feat_arr.shape[3]
    out_arr = np.empty((1, cch, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] feat = feat_arr
    cdef float[:, :, :, ::1] flow = flow_arr
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, y, x
    cdef float px, py
    with nogil:
        for ci in range(cch):
            for y in range(h):
                for x in range(w):
                    px = <float>x + flow[0, 0, y, x]
                    py = <float>y + flow[0, 1, y, x]
                    out[0, ci, y, x] = _bilinear(&feat[0, ci, 0, 0], h, w, px, py)
    return out_arr


def deform_conv_f32(cnp.ndarray x_arr, cnp.ndarray off_arr, cnp.ndarray kernel_arr,
                    cnp.ndarray bias_arr, int stride, int padding, int dilation,
                    int groups, int oh_i, int ow_i):
    cdef Py_ssize_t cin = x_arr.shape[1]
    cdef Py_ssize_t h = x_arr.shape[2]
    cdef Py_ssize_t w = x_arr.shape[3]
    cdef Py_ssize_t cout = kernel_arr.shape[0]
    cdef Py_ssize_t kh = kernel_arr.shape[2]
    cdef Py_ssize_t kw = kernel_arr.shape[3]
    cdef Py_ssize_t oh = oh_i, ow = ow_i
    cdef Py_ssize_t cg = cin // groups

    out_arr = np.empty((1, cout, oh, ow), dtype=np.float32)
    samp_arr = np.empty((cin, oh, ow), dtype=np.float32)

    cdef float[:, :, :, ::1] x = x_arr
    cdef float[:, :, :, ::1] off = off_arr
    cdef float[:, :, :, ::1] k = kernel_arr
    cdef float[::1] bias = bias_arr
    cdef float[:, :, :, ::1] out = out_arr
    cdef float[:, :, ::1] samp = samp_arr
    cdef Py_ssize_t g, ci, co, r, c, y, xx, ch, tap
    cdef float px, py, kk
    with nogil:
        for co in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    out[0, co, y, xx] = bias[co]
        for r in range(kh):
            for c in range(kw):
                tap = r * kw + c
                for g in range(groups):
                    ch = 2 * (g * kh * kw + tap)
                    for y in range(oh):
                        for xx in range(ow):
                            py = <float>(y * stride - padding + r * dilation) + off[0, ch, y, xx]
                            px = <float>(xx * stride - padding + c * dilation) + off[0, ch + 1, y, xx]
                            for ci in range(g * cg, (g + 1) * cg):
                                samp[ci, y, xx] = _bilinear(&x[0, ci, 0, 0], h, w, px, py)
                # accumulation stays (row, column, input channel) per element
                for co in range(cout):
                    for ci in range(cin):
                        kk = k[co, ci, r, c]
                        for y in range(oh):
                            for xx in range(ow):
                                out[0, co, y, xx] = out[0, co, y, xx] + kk * samp[ci, y, xx]
    return out_arr
