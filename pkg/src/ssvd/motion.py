"""Flow-warping stream: per-level flow fields, flow providers, feature
calibration (backward warping), and plain temporal averaging.

Flow maps reference-frame coordinates to support-frame coordinates: the
pixel shown at (x, y) in the reference sits at (x + dx, y + dy) in the
support frame. Full-resolution flow moves to pyramid level i by 2**i
average pooling and dividing displacements by 2**i.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import flowio
from . import kernels as K
from .backbone import LEVELS, FeaturePyramid
from .errors import ConfigurationError, DimensionError
from .tensorio import require_tensor


@dataclass
class FlowField:
    """Per-level (1, 2, h, w) flow tensors for one (reference, support) pair."""

    levels: dict
    reference: int
    support: int

    def __getitem__(self, level: int) -> np.ndarray:
        return self.levels[level]


def downscale_flow(full: np.ndarray, levels=LEVELS) -> dict:
    """Average-pool full-res (1, 2, h, w) flow to each level and rescale
    the displacement into that level's pixel units."""
    full = require_tensor(full, "flow")
    h, w = full.shape[2], full.shape[3]
    out = {}
    for lv in levels:
        f = 2 ** lv
        if h % f or w % f:
            raise DimensionError(f"flow size {h}x{w} not divisible by 2**{lv}")
        pooled = full.reshape(1, 2, h // f, f, w // f, f).mean(axis=(3, 5), dtype=np.float64)
        out[lv] = (pooled / f).astype(np.float32)
    return out


class ExactSyntheticFlow:
    """Analytic flow reconstructed from a synthetic scene's ground truth."""

    def __init__(self, truth, levels=LEVELS):
        self.truth = truth
        self.levels = levels

    def flow(self, reference: int, support: int) -> FlowField:
        from .synth import truth_flow_full
        full = truth_flow_full(self.truth, reference, support - reference)
        return FlowField(downscale_flow(full, self.levels), reference, support)


class FloFileFlow:
    """Reads per-pair files named flow_{reference:04d}_{support:04d}.flo
    (full resolution) from a directory; frame indices are 0-based."""

    def __init__(self, directory, levels=LEVELS):
        self.directory = directory
        self.levels = levels

    def flow(self, reference: int, support: int) -> FlowField:
        name = f"flow_{reference:04d}_{support:04d}.flo"
        path = os.path.join(self.directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"no flow file for pair (reference={reference}, support={support}): {path}"
            )
        full = flowio.flow_to_tensor(flowio.read_flo(path))
        return FlowField(downscale_flow(full, self.levels), reference, support)


class BlockMatcherFlow:
    """Exhaustive integer block matching on grayscale frames.

    For each reference pixel, picks the displacement in the search window
    minimizing patch SAD; ties prefer the smallest displacement magnitude,
    then lexicographic (dy, dx).
    """

    def __init__(self, frames, patch_radius: int = 3, search_radius: int = 8, levels=LEVELS):
        if patch_radius < 1 or search_radius < 1:
            raise ConfigurationError(
                f"patch_radius={patch_radius} search_radius={search_radius} must be >= 1"
            )
        self.frames = frames
        self.patch_radius = patch_radius
        self.search_radius = search_radius
        self.levels = levels

    def flow(self, reference: int, support: int) -> FlowField:
        ref = self.frames[reference].mean(axis=1, dtype=np.float64)[0]
        sup = self.frames[support].mean(axis=1, dtype=np.float64)[0]
        full = block_match(ref, sup, self.patch_radius, self.search_radius)
        return FlowField(downscale_flow(full, self.levels), reference, support)


def block_match(ref: np.ndarray, sup: np.ndarray, patch_radius: int, search_radius: int) -> np.ndarray:
    """Dense integer flow (1, 2, h, w); candidates scanned in fixed
    (magnitude, dy, dx) order with strict-improvement updates."""
    h, w = ref.shape
    big = 1e9  # cost charged to out-of-frame support pixels
    cands = sorted(
        ((dy, dx) for dy in range(-search_radius, search_radius + 1)
         for dx in range(-search_radius, search_radius + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
    )
    best_cost = np.full((h, w), np.inf)
    best_dy = np.zeros((h, w), np.float32)
    best_dx = np.zeros((h, w), np.float32)
    for dy, dx in cands:
        diff = np.full((h, w), big)
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 < ys1 and xs0 < xs1:
            diff[ys0:ys1, xs0:xs1] = np.abs(
                ref[ys0:ys1, xs0:xs1] - sup[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
            )
        cost = _box_sum(diff, patch_radius)
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_dy[better] = dy
        best_dx[better] = dx
    return np.ascontiguousarray(np.stack([best_dx, best_dy])[None]).astype(np.float32)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sliding (2r+1)^2 window sum with zero outside, via integral image."""
    h, w = arr.shape
    ii = np.zeros((h + 1, w + 1), np.float64)
    ii[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (ii[y1[:, None], x1[None, :]] - ii[y0[:, None], x1[None, :]]
            - ii[y1[:, None], x0[None, :]] + ii[y0[:, None], x0[None, :]])


def calibrate(support_pyramid: FeaturePyramid, flow: FlowField) -> FeaturePyramid:
    """Warp every level of a support pyramid onto the reference frame."""
    warped = {}
    for lv in support_pyramid:
        feat = support_pyramid[lv]
        fl = flow[lv]
        if feat.shape[2:] != fl.shape[2:]:
            raise DimensionError(
                f"level {lv}: feature {feat.shape[2:]} vs flow {fl.shape[2:]}"
            )
        warped[lv] = K.warp(feat, fl)
    return FeaturePyramid(warped)


def aggregate_motion(contributions: list) -> FeaturePyramid:
    """Plain per-level average of calibrated pyramids, in list order.

    At inference the list holds the reference's own pyramid (identity
    contribution) plus every selected warped support, ordered by frame
    offset; truncated windows just average whatever is available.
    """
    if not contributions:
        raise ConfigurationError("aggregate_motion needs at least one contribution")
    out = {}
    for lv in contributions[0]:
        out[lv] = K.mean_stack([p[lv] for p in contributions])
    return FeaturePyramid(out)
