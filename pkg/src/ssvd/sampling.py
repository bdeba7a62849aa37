"""Sampling stream: a small U-shaped offset predictor feeds a deformable
convolution that hallucinates the reference frame's features from each
support frame, followed by plain averaging.

Offset tensors carry 2*kh*kw*groups channels; for offset group g and tap
(r, c) row-major, channel 2*(g*kh*kw + r*kw + c) is dy and the next one dx.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .backbone import FeaturePyramid, ortho_conv
from .errors import ConfigurationError, DimensionError
from .tensorio import require_tensor

KERNEL = 3
GROUPS = 4
OFFSET_CHANNELS = 2 * KERNEL * KERNEL * GROUPS  # 72

_PREDICTOR_PLAN = [
    # (name, stride); each group is two rectified 3x3 convs, groups 2 and 3
    # open with a stride-2 conv so group 3 covers 4x the extent of group 1
    ("group1.conv1", 1), ("group1.conv2", 1),
    ("group2.conv1", 2), ("group2.conv2", 1),
    ("group3.conv1", 2), ("group3.conv2", 1),
]


@dataclass
class OffsetPredictorWeights:
    convs: dict
    channels: int

    def __post_init__(self):
        expected = [n for n, _ in _PREDICTOR_PLAN] + ["final"]
        missing = [n for n in expected if n not in self.convs]
        if missing:
            raise ConfigurationError(f"offset predictor missing convs {missing}")
        if self.convs["final"].out_channels != OFFSET_CHANNELS:
            raise ConfigurationError(
                f"final prediction conv must emit {OFFSET_CHANNELS} channels, "
                f"got {self.convs['final'].out_channels}"
            )


def init_offset_predictor(seed: int, channels: int, zero_final: bool = True) -> OffsetPredictorWeights:
    """Seeded init; the final prediction conv starts at zero so an untrained
    sampling stream degenerates to plain averaging."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0FF5]))
    convs = {}
    for name, stride in _PREDICTOR_PLAN:
        cin = 2 * channels if name == "group1.conv1" else channels
        convs[name] = ortho_conv(rng, channels, cin, 3, stride=stride, padding=1)
    if zero_final:
        final = K.ConvSpec(
            np.zeros((OFFSET_CHANNELS, 3 * channels, 3, 3), np.float32),
            np.zeros(OFFSET_CHANNELS, np.float32), padding=1,
        )
    else:
        final = ortho_conv(rng, OFFSET_CHANNELS, 3 * channels, 3, padding=1)
    convs["final"] = final
    return OffsetPredictorWeights(convs, channels)


def predict_offsets(reference_feat: np.ndarray, support_feat: np.ndarray,
                    weights: OffsetPredictorWeights) -> np.ndarray:
    """(1, c, h, w) x 2 -> (1, 72, h, w) offsets for one pyramid level."""
    reference_feat = require_tensor(reference_feat, "reference feature")
    support_feat = require_tensor(support_feat, "support feature")
    if reference_feat.shape != support_feat.shape:
        raise DimensionError(
            f"reference {reference_feat.shape} vs support {support_feat.shape}"
        )
    cv = weights.convs
    h, w = reference_feat.shape[2:]

    x = K.concat_channels([support_feat, reference_feat])
    o1 = K.relu(K.conv2d(K.relu(K.conv2d(x, cv["group1.conv1"])), cv["group1.conv2"]))
    o2 = K.relu(K.conv2d(K.relu(K.conv2d(o1, cv["group2.conv1"])), cv["group2.conv2"]))
    o3 = K.relu(K.conv2d(K.relu(K.conv2d(o2, cv["group3.conv1"])), cv["group3.conv2"]))
    merged = K.concat_channels([
        o1,
        K.upsample_nearest(o2, 2, (h, w)),
        K.upsample_nearest(o3, 4, (h, w)),
    ])
    return K.conv2d(merged, cv["final"])


def oracle_offsets(flow_level: np.ndarray, clamp_radius: float) -> np.ndarray:
    """Offsets derived from exact flow, magnitude-clamped to emulate the
    predictor's bounded spatial reach; same motion for every tap and group."""
    flow_level = require_tensor(flow_level, "flow level")
    if flow_level.shape[1] != 2:
        raise DimensionError(f"flow level must be (1, 2, h, w), got {flow_level.shape}")
    dx = flow_level[0, 0].astype(np.float64)
    dy = flow_level[0, 1].astype(np.float64)
    mag = np.sqrt(dx * dx + dy * dy)
    scale = np.where(mag > clamp_radius, clamp_radius / np.maximum(mag, 1e-12), 1.0)
    dxc = (dx * scale).astype(np.float32)
    dyc = (dy * scale).astype(np.float32)
    h, w = dx.shape
    out = np.empty((1, OFFSET_CHANNELS, h, w), np.float32)
    out[0, 0::2] = dyc
    out[0, 1::2] = dxc
    return out


def init_sampler(channels: int, seed: int | None = None) -> K.ConvSpec:
    """Deformable sampling kernel. Default is the identity center tap so the
    untrained stream reproduces its input; pass a seed for random weights."""
    if seed is None:
        kernel = np.zeros((channels, channels, KERNEL, KERNEL), np.float32)
        for c in range(channels):
            kernel[c, c, KERNEL // 2, KERNEL // 2] = 1.0
        return K.ConvSpec(kernel, np.zeros(channels, np.float32), padding=1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3F]))
    return ortho_conv(rng, channels, channels, KERNEL, padding=1)


def hallucinate(support_feat: np.ndarray, offsets: np.ndarray, sampler: K.ConvSpec) -> np.ndarray:
    """Deformable convolution of one support level under predicted offsets."""
    return K.deform_conv(support_feat, offsets, sampler, GROUPS)


def aggregate_sampling(contributions: list) -> FeaturePyramid:
    """Per-level average of hallucinated pyramids, in list order."""
    if not contributions:
        raise ConfigurationError("aggregate_sampling needs at least one contribution")
    out = {}
    for lv in contributions[0]:
        out[lv] = K.mean_stack([p[lv] for p in contributions])
    return FeaturePyramid(out)


def sampling_locations(offsets: np.ndarray, sampler: K.ConvSpec) -> np.ndarray:
    """(groups, kh*kw, h, w, 2) float32 (sx, sy) sampling positions."""
    return K.deform_sampling_locations(offsets, sampler, GROUPS)


def write_sampling_locations_jsonl(fobj, level: int, offsets: np.ndarray, sampler: K.ConvSpec) -> int:
    """Dump {level, y, x, group, tap, sx, sy} records; returns record count."""
    locs = sampling_locations(offsets, sampler)
    g_n, taps, h, w, _ = locs.shape
    n = 0
    for g in range(g_n):
        for tap in range(taps):
            for y in range(h):
                for x in range(w):
                    rec = {
                        "level": level, "y": y, "x": x, "group": g, "tap": tap,
                        "sx": float(locs[g, tap, y, x, 0]),
                        "sy": float(locs[g, tap, y, x, 1]),
                    }
                    fobj.write(json.dumps(rec) + "\n")
                    n += 1
    return n
