"""Closed-form head fitting.

The backbone and head trunks stay at their seeded initialization; only the
two final 3x3 prediction convs are set, by ridge regression on rendered
clean scenes:

- class branch: a cell is positive for class c when its center lies in the
  central portion of a class-c box at the object's natural pyramid level;
  object-edge cells are dropped, everything else is background.  All nine
  anchor slots of a class share one solution (slots cannot be told apart
  linearly), so the solve is per class.  Rare-row groups are re-weighted:
  foreground to a fixed share of the total mass, other-class object cells
  and near-object background cells as hard negatives.
- box branch: per slot, the four encoded deltas are regressed on the 3x3
  trunk patches of on-object cells at the natural level (texture phase
  encodes where inside the object a cell sits; the per-slot bias absorbs
  the class size prior).

Both branches share one patch-extraction pass per frame, so calibration
costs a handful of matrix products per scene.
"""

import numpy as np

from . import kernels as K
from .backbone import extract_pyramid
from .heads import (ANCHORS_PER_LOC, BASE_AREAS, HeadWeights, encode_boxes,
                    generate_anchors, head_trunk)
from .synth import build_truth, render_frame

FG_LOGIT = 3.0
BG_LOGIT = -4.0
EDGE_LOGIT = -1.0
FG_SHRINK = 0.30   # keep the central 1-2*FG_SHRINK of the box as positive
RING_GROW = 1.00   # near-object background band treated as hard negatives
BOX_SHRINK = 0.22  # regress boxes on the central cells only (cleaner targets)


def _patch_rows(feat: np.ndarray) -> np.ndarray:
    """(1, c, h, w) -> (h*w, 9c+1) rows of zero-padded 3x3 patches plus bias,
    flattened in the conv kernel's (cin, ky, kx) order."""
    c, h, w = feat.shape[1:]
    padded = np.pad(feat[0], ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    rows = win.transpose(1, 2, 0, 3, 4).reshape(h * w, 9 * c)
    return np.concatenate([rows, np.ones((h * w, 1), rows.dtype)], axis=1).astype(np.float64)


def natural_level(box: np.ndarray, levels=(3, 4, 5, 6)) -> int:
    """Pyramid level whose anchor base size best matches the box scale."""
    size = float(np.sqrt(max(box[2] - box[0], 1e-6) * max(box[3] - box[1], 1e-6)))
    return min(levels, key=lambda lv: abs(np.log(size / np.sqrt(BASE_AREAS[lv]))))


def _shrunk(box, f):
    w, h = box[2] - box[0], box[3] - box[1]
    return (box[0] + f * w, box[1] + f * h, box[2] - f * w, box[3] - f * h)


def _cells_inside(box, h, w, stride):
    """Row indices (y*w + x) of cells whose center falls inside the box."""
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    in_x = (cx >= box[0]) & (cx <= box[2])
    in_y = (cy >= box[1]) & (cy <= box[3])
    yy, xx = np.nonzero(np.outer(in_y, in_x))
    return yy * w + xx


class HeadSolver:
    """Accumulates ridge normal equations for both head branches."""

    def __init__(self, channels: int, num_classes: int):
        self.c = channels
        self.k = num_classes
        d = 9 * channels + 1
        self.cls_gram = np.zeros((d, d))
        self.cls_sum = np.zeros(d)
        self.n_rows = 0
        self.fg_gram = np.zeros((num_classes, d, d))
        self.fg_sum = np.zeros((num_classes, d))
        self.fg_count = np.zeros(num_classes, np.int64)
        self.edge_gram = np.zeros((num_classes, d, d))
        self.edge_sum = np.zeros((num_classes, d))
        self.edge_count = np.zeros(num_classes, np.int64)
        self.ring_gram = np.zeros((d, d))
        self.ring_sum = np.zeros(d)
        self.ring_count = 0
        self.box_gram = np.zeros((d, d))
        self.box_rhs = np.zeros((d, 4 * ANCHORS_PER_LOC))
        self.box_count = 0

    def add_frame(self, pyramid, head_weights: HeadWeights, anchors, gt_rows: list) -> None:
        """gt_rows: list of (class_id, (4,) box) for one frame."""
        rows_nat = [(cid, np.asarray(box, np.float64), natural_level(box))
                    for cid, box in gt_rows]

        for lv in pyramid:
            feat = pyramid[lv]
            h, w = feat.shape[2:]
            stride = 2 ** lv
            labels = np.zeros(h * w, np.int64)
            edge_lab = np.zeros(h * w, np.int64)
            ring = np.zeros(h * w, bool)
            box_cells, box_targets = [], []
            slot_anchors = anchors.boxes[anchors.level_slices[lv]].reshape(
                h * w, ANCHORS_PER_LOC, 4)
            for cid, box, nat in rows_nat:
                ring[_cells_inside(_shrunk(box, -RING_GROW), h, w, stride)] = True
                if nat != lv:
                    # off-scale levels must stay background for every class,
                    # or unconstrained coarse cells fire over any object
                    continue
                inside = _cells_inside(box, h, w, stride)
                edge_lab[inside] = cid  # object-edge band; re-labeled fg below
                labels[_cells_inside(_shrunk(box, FG_SHRINK), h, w, stride)] = cid
                box_sel = inside if BOX_SHRINK is None else _cells_inside(
                    _shrunk(box, BOX_SHRINK), h, w, stride)
                for r in box_sel:
                    box_cells.append(r)
                    box_targets.append(encode_boxes(slot_anchors[r], np.tile(box, (ANCHORS_PER_LOC, 1))))
            edge_lab[labels > 0] = 0
            edge = edge_lab > 0
            ring &= ~edge
            ring &= labels == 0

            tc = head_trunk(feat, head_weights, "cls")
            rows = _patch_rows(tc)
            keep = ~edge
            kept = rows[keep]
            self.cls_gram += kept.T @ kept
            self.cls_sum += kept.sum(axis=0)
            self.n_rows += kept.shape[0]
            lab = labels[keep]
            for cid in range(1, self.k + 1):
                sel = kept[lab == cid]
                if sel.shape[0]:
                    self.fg_gram[cid - 1] += sel.T @ sel
                    self.fg_sum[cid - 1] += sel.sum(axis=0)
                    self.fg_count[cid - 1] += sel.shape[0]
                esel = rows[edge_lab == cid]
                if esel.shape[0]:
                    self.edge_gram[cid - 1] += esel.T @ esel
                    self.edge_sum[cid - 1] += esel.sum(axis=0)
                    self.edge_count[cid - 1] += esel.shape[0]
            ring_rows = rows[ring]
            if ring_rows.shape[0]:
                self.ring_gram += ring_rows.T @ ring_rows
                self.ring_sum += ring_rows.sum(axis=0)
                self.ring_count += ring_rows.shape[0]

            if box_cells:
                tb = head_trunk(feat, head_weights, "box")
                brows = _patch_rows(tb)[np.asarray(box_cells)]
                tgt = np.stack([t.reshape(-1) for t in box_targets])  # (n, 36)
                self.box_gram += brows.T @ brows
                self.box_rhs += brows.T @ tgt
                self.box_count += brows.shape[0]

    def solve(self, head_weights: HeadWeights, ridge: float = 1e-4,
              ridge_box: float = 1e-3, fg_mass: float = 0.6, hn_mass: float = 0.3,
              ring_mass: float = 1.2, fg_logit: float = FG_LOGIT,
              bg_logit: float = BG_LOGIT) -> HeadWeights:
        """New HeadWeights with fitted cls.out / box.out conv specs.

        hn_mass re-weights other-class object cells (a class channel must
        learn "not any object", not just "not background"); ring_mass
        re-weights near-object background cells (ghost suppression).
        """
        c, k = self.c, self.k
        d = 9 * c + 1
        lam = ridge * np.trace(self.cls_gram) / d
        cls_kernel = np.zeros((k * ANCHORS_PER_LOC, c, 3, 3), np.float32)
        cls_bias = np.zeros(k * ANCHORS_PER_LOC, np.float32)
        w_ring = max(1.0, ring_mass * self.n_rows / max(self.ring_count, 1))
        for cid in range(1, k + 1):
            n_fg = int(self.fg_count[cid - 1])
            w_fg = max(1.0, fg_mass * self.n_rows / max(n_fg, 1))
            gram = self.cls_gram + (w_fg - 1.0) * self.fg_gram[cid - 1] + lam * np.eye(d)
            rhs = (bg_logit * self.cls_sum
                   + (w_fg * fg_logit - bg_logit) * self.fg_sum[cid - 1])
            for other in range(1, k + 1):
                if other == cid:
                    # own-class edge band: mildly negative so edge cells rank
                    # below true centers without being forced to background
                    if self.edge_count[cid - 1]:
                        w_e = max(1.0, ring_mass * self.n_rows / int(self.edge_count[cid - 1]))
                        gram += w_e * self.edge_gram[cid - 1]
                        rhs += w_e * EDGE_LOGIT * self.edge_sum[cid - 1]
                    continue
                if self.fg_count[other - 1]:
                    w_hn = max(1.0, hn_mass * self.n_rows / int(self.fg_count[other - 1]))
                    gram += (w_hn - 1.0) * self.fg_gram[other - 1]
                    rhs += (w_hn - 1.0) * bg_logit * self.fg_sum[other - 1]
                if self.edge_count[other - 1]:
                    w_hn = max(1.0, hn_mass * self.n_rows / int(self.edge_count[other - 1]))
                    gram += w_hn * self.edge_gram[other - 1]
                    rhs += w_hn * bg_logit * self.edge_sum[other - 1]
            if self.ring_count:
                gram += (w_ring - 1.0) * self.ring_gram
                rhs += (w_ring - 1.0) * bg_logit * self.ring_sum
            sol = np.linalg.solve(gram, rhs)
            kernel = sol[:9 * c].reshape(c, 3, 3).astype(np.float32)
            for a in range(ANCHORS_PER_LOC):
                j = a * k + cid - 1
                cls_kernel[j] = kernel
                cls_bias[j] = sol[9 * c]

        box_kernel = np.zeros((4 * ANCHORS_PER_LOC, c, 3, 3), np.float32)
        box_bias = np.zeros(4 * ANCHORS_PER_LOC, np.float32)
        if self.box_count:
            lam_b = ridge_box * np.trace(self.box_gram) / d
            sol = np.linalg.solve(self.box_gram + lam_b * np.eye(d), self.box_rhs)
            for j in range(4 * ANCHORS_PER_LOC):
                box_kernel[j] = sol[:9 * c, j].reshape(c, 3, 3)
                box_bias[j] = sol[9 * c, j]

        convs = dict(head_weights.convs)
        convs["cls.out"] = K.ConvSpec(cls_kernel, cls_bias, padding=1)
        convs["box.out"] = K.ConvSpec(box_kernel, box_bias, padding=1)
        return HeadWeights(convs, k)


def calibrate_heads(backbone_weights, head_weights: HeadWeights, scene_specs: list,
                    frames_per_scene: int = 4, ridge: float = 1e-4,
                    ridge_box: float = 1e-3, fg_mass: float = 0.6,
                    hn_mass: float = 0.3, ring_mass: float = 1.2,
                    pyramid_fn=None) -> HeadWeights:
    """Fit the final head convs on rendered clean scenes; trunk untouched.

    pyramid_fn(spec, truth, t) overrides how the features for one frame are
    produced; a head applied to temporally aggregated features must be fitted
    on aggregated features too (averaging shifts the feature statistics), so
    each stream calibrates through its own aggregation path.
    """
    solver = HeadSolver(backbone_weights.config.channels, head_weights.num_classes)
    if pyramid_fn is None:
        def pyramid_fn(spec, truth, t):
            return extract_pyramid(render_frame(spec, t), backbone_weights)
    anchors_cache = {}
    for spec in scene_specs:
        truth = build_truth(spec)
        if spec.hw not in anchors_cache:
            anchors_cache[spec.hw] = generate_anchors(spec.hw)
        anchors = anchors_cache[spec.hw]
        picks = np.unique(np.linspace(0, spec.frames - 1, frames_per_scene).round().astype(int))
        for t in picks:
            rows = [(cid, box) for _, cid, box in truth.boxes_by_frame.get(int(t), [])]
            solver.add_frame(pyramid_fn(spec, truth, int(t)), head_weights, anchors, rows)
    return solver.solve(head_weights, ridge=ridge, ridge_box=ridge_box,
                        fg_mass=fg_mass, hn_mass=hn_mass, ring_mass=ring_mass)
