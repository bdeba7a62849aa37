"""Anchor grid and the shared class/box subnets.

Anchors: 9 per location (3 aspect ratios x 3 size factors), base areas
32^2..256^2 for P3..P6, centered at (stride*(x+0.5), stride*(y+0.5)),
enumerated in (level, y, x, slot) order with slot = ratio_idx*3 +
factor_idx. Box regression uses center offsets normalized by anchor size
and log size ratios, which decode inverts exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .backbone import LEVELS, FeaturePyramid, mirrored_conv, ortho_conv
from .errors import ConfigurationError, DimensionError

RATIOS = (0.5, 1.0, 2.0)                       # w:h of 1:2, 1:1, 2:1
SIZE_FACTORS = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
BASE_AREAS = {3: 32.0 ** 2, 4: 64.0 ** 2, 5: 128.0 ** 2, 6: 256.0 ** 2}
ANCHORS_PER_LOC = len(RATIOS) * len(SIZE_FACTORS)


@dataclass
class Anchors:
    boxes: np.ndarray          # (n, 4) float64 x1, y1, x2, y2
    level: np.ndarray          # (n,) int
    grid_y: np.ndarray
    grid_x: np.ndarray
    slot: np.ndarray
    level_slices: dict         # level -> slice into the arrays
    input_hw: tuple

    def __len__(self) -> int:
        return self.boxes.shape[0]


def anchor_shapes(level: int) -> np.ndarray:
    """(9, 2) anchor (w, h) for one level, slot-ordered."""
    area = BASE_AREAS[level]
    shapes = np.empty((ANCHORS_PER_LOC, 2), np.float64)
    i = 0
    for ratio in RATIOS:
        for factor in SIZE_FACTORS:
            scaled = area * factor * factor
            w = np.sqrt(scaled * ratio)
            h = np.sqrt(scaled / ratio)
            shapes[i] = (w, h)
            i += 1
    return shapes


def generate_anchors(input_hw: tuple, levels=LEVELS) -> Anchors:
    h, w = input_hw
    if h % 64 or w % 64:
        raise DimensionError(f"input {h}x{w} must be divisible by 64")
    boxes, lvl, gy, gx, slot = [], [], [], [], []
    level_slices = {}
    start = 0
    for level in levels:
        stride = 2 ** level
        fh, fw = h // stride, w // stride
        shapes = anchor_shapes(level)
        cy = (np.arange(fh, dtype=np.float64) + 0.5) * stride
        cx = (np.arange(fw, dtype=np.float64) + 0.5) * stride
        # (fh, fw, 9, ...) then flatten in (y, x, slot) order
        cyg, cxg = np.meshgrid(cy, cx, indexing="ij")
        half_w = shapes[:, 0] / 2.0
        half_h = shapes[:, 1] / 2.0
        b = np.empty((fh, fw, ANCHORS_PER_LOC, 4), np.float64)
        b[..., 0] = cxg[..., None] - half_w
        b[..., 1] = cyg[..., None] - half_h
        b[..., 2] = cxg[..., None] + half_w
        b[..., 3] = cyg[..., None] + half_h
        n = fh * fw * ANCHORS_PER_LOC
        boxes.append(b.reshape(n, 4))
        yy, xx, ss = np.meshgrid(np.arange(fh), np.arange(fw), np.arange(ANCHORS_PER_LOC), indexing="ij")
        gy.append(yy.reshape(-1))
        gx.append(xx.reshape(-1))
        slot.append(ss.reshape(-1))
        lvl.append(np.full(n, level, np.int64))
        level_slices[level] = slice(start, start + n)
        start += n
    return Anchors(
        np.concatenate(boxes), np.concatenate(lvl), np.concatenate(gy),
        np.concatenate(gx), np.concatenate(slot), level_slices, (h, w),
    )


def write_anchor_csv(path, anchors: Anchors) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["level", "y", "x", "slot", "x1", "y1", "x2", "y2"])
        for i in range(len(anchors)):
            wr.writerow([
                int(anchors.level[i]), int(anchors.grid_y[i]), int(anchors.grid_x[i]),
                int(anchors.slot[i]),
                f"{anchors.boxes[i, 0]:.4f}", f"{anchors.boxes[i, 1]:.4f}",
                f"{anchors.boxes[i, 2]:.4f}", f"{anchors.boxes[i, 3]:.4f}",
            ])


# ---------------------------------------------------------------------------
# box coding

def encode_boxes(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(n, 4) anchors + matched boxes -> (n, 4) deltas (float64)."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gcx = (gt[:, 0] + gt[:, 2]) / 2.0
    gcy = (gt[:, 1] + gt[:, 3]) / 2.0
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("cannot encode degenerate ground-truth boxes")
    return np.stack([
        (gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)
    ], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


# ---------------------------------------------------------------------------
# matching

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, 4) x (m, 4) -> (n, m) IoU in float64."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    ix = np.maximum(
        0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    )
    iy = np.maximum(
        0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    )
    inter = ix * iy
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class MatchResult:
    labels: np.ndarray        # (n,) int: -1 ignore, 0 background, >=1 class id
    matched_gt: np.ndarray    # (n,) int gt index, -1 where no match
    deltas: np.ndarray        # (n, 4) float64 regression targets (rows valid where matched)
    num_foreground: int


def match_anchors(anchors: Anchors, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  fg_iou: float = 0.5, bg_iou: float = 0.4) -> MatchResult:
    """IoU >= fg_iou -> foreground to the max-IoU gt; < bg_iou -> background;
    in between -> ignore. Every gt then claims its own best anchor (ties to
    the lowest index, already-claimed anchors skipped) so each gt keeps at
    least one foreground anchor."""
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, np.int64).reshape(-1)
    labels = np.zeros(n, np.int64)
    matched = np.full(n, -1, np.int64)
    if gt_boxes.shape[0] == 0:
        return MatchResult(labels, matched, np.zeros((n, 4)), 0)
    if np.any(gt_labels < 1):
        raise ConfigurationError("ground-truth class ids must be >= 1 (0 is background)")

    ious = iou_matrix(anchors.boxes, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= fg_iou] = gt_labels[best_gt[best_iou >= fg_iou]]
    matched[best_iou >= fg_iou] = best_gt[best_iou >= fg_iou]
    labels[(best_iou >= bg_iou) & (best_iou < fg_iou)] = -1

    claimed = set()
    for m in range(gt_boxes.shape[0]):
        order = np.argsort(-ious[:, m], kind="stable")
        for idx in order:
            if int(idx) not in claimed:
                claimed.add(int(idx))
                labels[idx] = gt_labels[m]
                matched[idx] = m
                break

    deltas = np.zeros((n, 4), np.float64)
    fg = matched >= 0
    fg &= labels >= 1
    if np.any(fg):
        deltas[fg] = encode_boxes(anchors.boxes[fg], gt_boxes[matched[fg]])
    matched[~fg] = -1
    return MatchResult(labels, matched, deltas, int(np.count_nonzero(fg)))


# ---------------------------------------------------------------------------
# head subnets

@dataclass
class HeadWeights:
    """Class and box branches, each two rectified 3x3 convs plus a linear
    3x3 prediction conv; shared across pyramid levels."""

    convs: dict
    num_classes: int

    def __post_init__(self):
        expected = ["cls.conv1", "cls.conv2", "cls.out", "box.conv1", "box.conv2", "box.out"]
        missing = [k for k in expected if k not in self.convs]
        if missing:
            raise ConfigurationError(f"head weights missing convs {missing}")
        if self.convs["cls.out"].out_channels != self.num_classes * ANCHORS_PER_LOC:
            raise ConfigurationError(
                f"cls.out must emit {self.num_classes * ANCHORS_PER_LOC} channels"
            )
        if self.convs["box.out"].out_channels != 4 * ANCHORS_PER_LOC:
            raise ConfigurationError(f"box.out must emit {4 * ANCHORS_PER_LOC} channels")


def init_head_weights(seed: int, channels: int, num_classes: int) -> HeadWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    convs = {  # rectified trunk convs use mirrored pairs (lossless under relu)
        "cls.conv1": mirrored_conv(rng, channels, channels, 3, padding=1),
        "cls.conv2": mirrored_conv(rng, channels, channels, 3, padding=1),
        "cls.out": ortho_conv(rng, num_classes * ANCHORS_PER_LOC, channels, 3, padding=1),
        "box.conv1": mirrored_conv(rng, channels, channels, 3, padding=1),
        "box.conv2": mirrored_conv(rng, channels, channels, 3, padding=1),
        "box.out": ortho_conv(rng, 4 * ANCHORS_PER_LOC, channels, 3, padding=1),
    }
    return HeadWeights(convs, num_classes)


def head_trunk(feat: np.ndarray, weights: HeadWeights, branch: str) -> np.ndarray:
    cv = weights.convs
    x = K.relu(K.conv2d(feat, cv[f"{branch}.conv1"]))
    return K.relu(K.conv2d(x, cv[f"{branch}.conv2"]))


def head_forward(pyramid: FeaturePyramid, weights: HeadWeights) -> dict:
    """level -> (class logits (1, k*9, h, w), box deltas (1, 4*9, h, w)).

    Class channel a*k + c scores slot a for class id c+1; box channel
    a*4 + d is delta component d for slot a.
    """
    out = {}
    for lv in pyramid:
        feat = pyramid[lv]
        cls = K.conv2d(head_trunk(feat, weights, "cls"), weights.convs["cls.out"])
        box = K.conv2d(head_trunk(feat, weights, "box"), weights.convs["box.out"])
        out[lv] = (cls, box)
    return out


def flatten_head_outputs(outputs: dict, anchors: Anchors, num_classes: int) -> tuple:
    """Head maps -> ((n, k) logits, (n, 4) deltas) in anchor order."""
    logits, deltas = [], []
    for lv in sorted(outputs):
        cls, box = outputs[lv]
        _, _, h, w = cls.shape
        k = num_classes
        if cls.shape[1] != k * ANCHORS_PER_LOC or box.shape[1] != 4 * ANCHORS_PER_LOC:
            raise DimensionError(
                f"level {lv}: head channels {cls.shape[1]}/{box.shape[1]} do not match "
                f"{k * ANCHORS_PER_LOC}/{4 * ANCHORS_PER_LOC}"
            )
        lg = cls[0].reshape(ANCHORS_PER_LOC, k, h, w).transpose(2, 3, 0, 1).reshape(-1, k)
        dl = box[0].reshape(ANCHORS_PER_LOC, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
        logits.append(lg.astype(np.float64))
        deltas.append(dl.astype(np.float64))
    lg = np.concatenate(logits)
    dl = np.concatenate(deltas)
    if lg.shape[0] != len(anchors):
        raise DimensionError(f"flattened {lg.shape[0]} anchors, expected {len(anchors)}")
    return lg, dl
