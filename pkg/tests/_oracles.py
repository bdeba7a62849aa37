"""Independent brute-force references used to pin expected values.

Everything here is written as plain scalar loops in float64, on purpose:
slow, obvious, and structurally unrelated to the vectorized/compiled
implementations under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_slow(x, kernel, bias, stride=1, padding=0, dilation=1):
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    acc = float(bias[co])
                    for r in range(kh):
                        for c in range(kw):
                            iy = y * stride - padding + r * dilation
                            ix = xx * stride - padding + c * dilation
                            if 0 <= iy < h and 0 <= ix < w:
                                for ci in range(cin):
                                    acc += float(kernel[co, ci, r, c]) * float(x[bi, ci, iy, ix])
                    out[bi, co, y, xx] = acc
    return out


def bilinear_slow(plane, px, py):
    """One bilinear read from a 2-d map; out-of-range taps read zero."""
    h, w = plane.shape
    x0 = math.floor(px)
    y0 = math.floor(py)
    fx = px - x0
    fy = py - y0
    total = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xxx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xxx < w:
                total += wx * wy * float(plane[yy, xxx])
    return total


def warp_slow(feature, flow):
    _, c, h, w = feature.shape
    out = np.zeros((1, c, h, w), dtype=np.float64)
    for ci in range(c):
        for y in range(h):
            for x in range(w):
                out[0, ci, y, x] = bilinear_slow(
                    feature[0, ci], x + float(flow[0, 0, y, x]), y + float(flow[0, 1, y, x])
                )
    return out


def deform_conv_slow(x, offsets, kernel, bias, stride, padding, dilation, groups):
    _, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    cg = cin // groups
    out = np.zeros((1, cout, oh, ow), dtype=np.float64)
    for co in range(cout):
        for y in range(oh):
            for xx in range(ow):
                acc = float(bias[co])
                for r in range(kh):
                    for c in range(kw):
                        for ci in range(cin):
                            g = ci // cg
                            ch = 2 * (g * kh * kw + r * kw + c)
                            py = y * stride - padding + r * dilation + float(offsets[0, ch, y, xx])
                            px = xx * stride - padding + c * dilation + float(offsets[0, ch + 1, y, xx])
                            acc += float(kernel[co, ci, r, c]) * bilinear_slow(x[0, ci], px, py)
                out[0, co, y, xx] = acc
    return out


def iou_slow(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_slow(boxes, scores, classes, iou_threshold):
    """Greedy per-class suppression; ties broken by lower original index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep, removed = [], set()
    for i in order:
        if i in removed:
            continue
        keep.append(i)
        for j in order:
            if j == i or j in removed or classes[j] != classes[i]:
                continue
            if iou_slow(boxes[i], boxes[j]) > iou_threshold:
                removed.add(j)
    return sorted(keep)


def best_path_slow(frames_nodes, scores, link):
    """Exhaustive max-total-score path over adjacency-linked frame nodes.

    frames_nodes: list per frame of node ids; scores: dict node -> score;
    link: set of (node_a, node_b) allowed adjacent-frame transitions.
    Returns (best_total, best_path) where ties prefer the lexicographically
    smaller node-id sequence.
    """
    best = (float("-inf"), None)
    n_frames = len(frames_nodes)
    for start_f in range(n_frames):
        stack = [( [n], scores[n] ) for n in frames_nodes[start_f]]
        while stack:
            path, total = stack.pop()
            cand = (total, path)
            if cand[0] > best[0] or (cand[0] == best[0] and best[1] is not None
                                     and cand[1] < best[1]):
                best = cand
            f = start_f + len(path)
            if f < n_frames:
                for nxt in frames_nodes[f]:
                    if (path[-1], nxt) in link:
                        stack.append((path + [nxt], total + scores[nxt]))
    return best


def average_precision_slow(is_tp_ranked, n_gt):
    """All-point interpolated AP from a ranked TP/FP flag list."""
    tp = 0
    points = []
    for i, flag in enumerate(is_tp_ranked):
        if flag:
            tp += 1
        points.append((tp / n_gt, tp / (i + 1)))
    ap = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r > prev_r:
            p_max = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * p_max
            prev_r = r
    return ap
