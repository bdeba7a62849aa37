"""Decoding raw head outputs into boxes, greedy NMS, two-stream late
fusion, and Seq-NMS tubelet rescoring.

All ordering rules are deterministic: candidates rank by (score desc,
original index asc), and suppression drops same-class boxes with IoU
strictly above the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .heads import ANCHORS_PER_LOC, Anchors, decode_boxes, iou_matrix
from .losses import sigmoid


@dataclass
class Detections:
    """Column arrays describing a set of boxes (possibly across frames)."""

    boxes: np.ndarray       # (n, 4) float64
    scores: np.ndarray      # (n,) float64
    class_ids: np.ndarray   # (n,) int64, >= 1
    frames: np.ndarray      # (n,) int64
    streams: np.ndarray     # (n,) unicode tag, "motion" or "sampling"

    @staticmethod
    def empty() -> "Detections":
        return Detections(
            np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64),
            np.zeros(0, np.int64), np.zeros(0, dtype="<U8"),
        )

    @staticmethod
    def build(boxes, scores, class_ids, frame=0, stream="motion") -> "Detections":
        boxes = np.asarray(boxes, np.float64).reshape(-1, 4)
        n = boxes.shape[0]
        frames = np.full(n, frame, np.int64) if np.isscalar(frame) else np.asarray(frame, np.int64)
        streams = (np.full(n, stream, dtype="<U8") if isinstance(stream, str)
                   else np.asarray(stream, dtype="<U8"))
        return Detections(boxes, np.asarray(scores, np.float64).reshape(-1),
                          np.asarray(class_ids, np.int64).reshape(-1), frames, streams)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def subset(self, idx) -> "Detections":
        idx = np.asarray(idx, np.int64)
        return Detections(self.boxes[idx], self.scores[idx], self.class_ids[idx],
                          self.frames[idx], self.streams[idx])

    @staticmethod
    def concat(parts: list) -> "Detections":
        parts = [p for p in parts]
        if not parts:
            return Detections.empty()
        return Detections(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.scores for p in parts]),
            np.concatenate([p.class_ids for p in parts]),
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.streams.astype("<U8") for p in parts]),
        )

    def to_records(self) -> list:
        recs = []
        for i in range(len(self)):
            recs.append({
                "frame": int(self.frames[i]),
                "class": int(self.class_ids[i]),
                "score": float(self.scores[i]),
                "x1": float(self.boxes[i, 0]), "y1": float(self.boxes[i, 1]),
                "x2": float(self.boxes[i, 2]), "y2": float(self.boxes[i, 3]),
                "stream": str(self.streams[i]),
            })
        return recs


def write_detections_jsonl(path, dets: Detections) -> None:
    with open(path, "w") as f:
        for rec in dets.to_records():
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections_jsonl(path) -> Detections:
    boxes, scores, classes, frames, streams = [], [], [], [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            boxes.append([r["x1"], r["y1"], r["x2"], r["y2"]])
            scores.append(r["score"])
            classes.append(r["class"])
            frames.append(r["frame"])
            streams.append(r.get("stream", "motion"))
    if not boxes:
        return Detections.empty()
    return Detections(np.asarray(boxes, np.float64), np.asarray(scores, np.float64),
                      np.asarray(classes, np.int64), np.asarray(frames, np.int64),
                      np.asarray(streams, dtype="<U8"))


def decode_detections(head_logits: np.ndarray, head_deltas: np.ndarray, anchors: Anchors,
                      frame: int = 0, stream: str = "motion",
                      score_threshold: float = 0.05, topk_per_level: int = 1000,
                      clip_hw: tuple | None = None) -> Detections:
    """Flattened (n, k) logits + (n, 4) deltas -> thresholded, per-level
    top-k, decoded and clipped detections (not yet NMS'd)."""
    scores_all = sigmoid(np.asarray(head_logits, np.float64))
    n, k = scores_all.shape
    keep_idx, keep_cls, keep_score = [], [], []
    for level, sl in anchors.level_slices.items():
        s = scores_all[sl]  # (m, k)
        m = s.shape[0]
        flat = s.reshape(-1)  # anchor-major, class-minor
        cand = np.nonzero(flat > score_threshold)[0]
        if cand.size > topk_per_level:
            # ties keep the lower flat index
            order = np.lexsort((cand, -flat[cand]))
            cand = cand[order[:topk_per_level]]
        ai = cand // k + sl.start
        ci = cand % k + 1
        keep_idx.append(ai)
        keep_cls.append(ci)
        keep_score.append(flat[cand])
    idx = np.concatenate(keep_idx)
    if idx.size == 0:
        return Detections.empty()
    cls = np.concatenate(keep_cls)
    scr = np.concatenate(keep_score)
    boxes = decode_boxes(anchors.boxes[idx], np.asarray(head_deltas, np.float64)[idx])
    if clip_hw is not None:
        h, w = clip_hw
        boxes[:, 0] = np.clip(boxes[:, 0], 0.0, w)
        boxes[:, 1] = np.clip(boxes[:, 1], 0.0, h)
        boxes[:, 2] = np.clip(boxes[:, 2], 0.0, w)
        boxes[:, 3] = np.clip(boxes[:, 3], 0.0, h)
    return Detections.build(boxes, scr, cls, frame, stream)


def nms(dets: Detections, iou_threshold: float = 0.45) -> Detections:
    """Greedy per-class suppression of same-class boxes with IoU strictly
    greater than the threshold; rank (score desc, original index asc)."""
    if len(dets) == 0:
        return dets
    keep_mask = np.zeros(len(dets), bool)
    for c in np.unique(dets.class_ids):
        idx = np.nonzero(dets.class_ids == c)[0]
        order = idx[np.lexsort((idx, -dets.scores[idx]))]
        boxes = dets.boxes[order]
        alive = np.ones(order.size, bool)
        for i in range(order.size):
            if not alive[i]:
                continue
            keep_mask[order[i]] = True
            if i + 1 < order.size:
                rest = np.nonzero(alive[i + 1:])[0] + i + 1
                if rest.size:
                    ious = iou_matrix(boxes[i], boxes[rest])[0]
                    alive[rest[ious > iou_threshold]] = False
    kept = np.nonzero(keep_mask)[0]
    return dets.subset(kept)


def late_fuse(motion: Detections, sampling: Detections, iou_threshold: float = 0.45) -> Detections:
    """Concatenate both streams (motion first) and run one NMS pass; the
    surviving boxes keep their stream tags."""
    return nms(Detections.concat([motion, sampling]), iou_threshold)


@dataclass
class Tubelet:
    class_id: int
    rescored: float
    members: list  # (frame, det_index, box, original_score)


def seq_nms(per_frame: list, link_iou: float = 0.5, suppress_iou: float = 0.45) -> tuple:
    """Seq-NMS across a list of per-frame Detections (already NMS'd).

    Repeatedly extracts the maximum-total-score path over same-class
    adjacent-frame links (IoU >= link_iou), rescores its members to the
    path mean, and suppresses, in each path frame, remaining same-class
    boxes with IoU > suppress_iou against the path member. Returns
    (rescored per-frame Detections list, tubelets).
    """
    n_frames = len(per_frame)
    # node state: per frame, arrays of alive candidate indices
    alive = [np.ones(len(d), bool) for d in per_frame]
    scores = [d.scores.copy() for d in per_frame]
    tubelets = []

    while True:
        path = _best_path(per_frame, alive, scores, link_iou)
        if path is None or len(path) < 2:
            break
        member_scores = [float(scores[f][i]) for f, i in path]
        mean_score = float(np.mean(member_scores))
        members = []
        cls = int(per_frame[path[0][0]].class_ids[path[0][1]])
        for f, i in path:
            members.append((f, int(i), per_frame[f].boxes[i].copy(), float(scores[f][i])))
            scores[f][i] = mean_score
            alive[f][i] = False
            # suppress overlapping same-class boxes in this frame
            d = per_frame[f]
            others = np.nonzero(alive[f] & (d.class_ids == cls))[0]
            if others.size:
                ious = iou_matrix(d.boxes[i], d.boxes[others])[0]
                for j in others[ious > suppress_iou]:
                    alive[f][j] = False
                    scores[f][j] = -1.0  # mark removed
        tubelets.append(Tubelet(cls, mean_score, members))

    out = []
    for f, d in enumerate(per_frame):
        keep = np.nonzero(scores[f] >= 0.0)[0]
        kept = d.subset(keep)
        kept.scores[:] = scores[f][keep]
        out.append(kept)
    return out, tubelets


def _best_path(per_frame, alive, scores, link_iou):
    """Max-total-score chain over alive nodes; dynamic program forward in
    time. Ties prefer the earlier frame and lower node index."""
    n_frames = len(per_frame)
    best_val = [None] * n_frames   # per frame: array of best path sums ending at node
    best_prev = [None] * n_frames
    overall = None  # (total, frame, node)
    for f in range(n_frames):
        d = per_frame[f]
        n = len(d)
        vals = np.where(alive[f], scores[f], -np.inf)
        prev = np.full(n, -1, np.int64)
        if f > 0 and len(per_frame[f - 1]):
            pvals = best_val[f - 1]
            dprev = per_frame[f - 1]
            for i in np.nonzero(alive[f])[0]:
                cands = np.nonzero(
                    (dprev.class_ids == d.class_ids[i]) & np.isfinite(pvals)
                )[0]
                if cands.size:
                    ious = iou_matrix(d.boxes[i], dprev.boxes[cands])[0]
                    linked = cands[ious >= link_iou]
                    if linked.size:
                        bi = linked[np.argmax(pvals[linked])]
                        if pvals[bi] > 0.0:  # scores are positive, so always extend
                            vals[i] = scores[f][i] + pvals[bi]
                            prev[i] = bi
        best_val[f] = vals
        best_prev[f] = prev
        if n:
            top = int(np.argmax(vals))
            if np.isfinite(vals[top]) and (overall is None or vals[top] > overall[0]):
                overall = (float(vals[top]), f, top)
    if overall is None:
        return None
    _, f, i = overall
    path = []
    while i >= 0:
        path.append((f, i))
        i = int(best_prev[f][i])
        f -= 1
    return list(reversed(path))
