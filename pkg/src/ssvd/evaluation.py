"""Detection-quality evaluation: per-class AP (all-point interpolation),
mAP, and speed-stratified variants.

Speed strata follow the mean-IoU-with-nearby-frames rule: for each ground
truth instance, average the IoU between its box and the same track's boxes
within +/- 10 frames; slow > 0.9, medium in [0.7, 0.9], fast < 0.7.
Single-frame tracks default to slow. Strata are defined on ground truth
only, so detections that match nothing are excluded from stratified
denominators (they still count as FP in the overall AP).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .heads import iou_matrix

STRATA = ("slow", "medium", "fast")


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


@dataclass
class GroundTruthTrack:
    track_id: int
    class_id: int
    boxes: dict  # frame key -> (4,) float box

    def frames(self):
        return sorted(self.boxes)


def speed_stratify(tracks: list, window: int = 10) -> dict:
    """(track_id, frame) -> stratum name for every ground-truth instance."""
    out = {}
    for tr in tracks:
        frames = tr.frames()
        for f in frames:
            others = [g for g in frames if g != f and abs(g - f) <= window]
            if not others:
                out[(tr.track_id, f)] = "slow"
                continue
            box = np.asarray(tr.boxes[f], np.float64).reshape(1, 4)
            rest = np.asarray([tr.boxes[g] for g in others], np.float64)
            mean_iou = float(np.mean(iou_matrix(box, rest)[0]))
            if mean_iou > 0.9:
                out[(tr.track_id, f)] = "slow"
            elif mean_iou >= 0.7:
                out[(tr.track_id, f)] = "medium"
            else:
                out[(tr.track_id, f)] = "fast"
    return out


def _match_detections(det_rows, gt_rows, iou_thresh):
    """Greedy matching for one class: det_rows sorted by (-score, index).

    det_rows: list of (score, frame, box, det_index); gt_rows: list of
    (frame, box, gt_key). Returns per-detection matched gt_key or None.
    """
    by_frame = {}
    for frame, box, key in gt_rows:
        by_frame.setdefault(frame, []).append((box, key))
    taken = set()
    assign = []
    for score, frame, box, _ in det_rows:
        cands = by_frame.get(frame, [])
        best_key, best_iou = None, iou_thresh
        for gbox, key in cands:
            if key in taken:
                continue
            v = iou(box, gbox)
            if v > best_iou or (v == best_iou and best_key is None and v >= iou_thresh):
                best_key, best_iou = key, v
        if best_key is not None:
            taken.add(best_key)
        assign.append(best_key)
    return assign


def _ap_from_flags(flags, n_gt):
    """All-point interpolated AP: area under the monotone precision
    envelope over recall."""
    if n_gt == 0:
        return 0.0
    flags = np.asarray(flags, bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    denom = np.arange(1, flags.size + 1)
    precision = tp / denom
    recall = tp / n_gt
    # envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(flags.size):
        if flags[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap)


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    stratified_map: dict
    gt_counts: dict
    stratum_gt_counts: dict

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "stratified_map": self.stratified_map,
            "gt_counts": {str(k): v for k, v in self.gt_counts.items()},
            "stratum_gt_counts": self.stratum_gt_counts,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["class", "ap", "n_gt"])
            for c in sorted(self.per_class_ap):
                wr.writerow([c, f"{self.per_class_ap[c]:.6f}", self.gt_counts.get(c, 0)])
            wr.writerow(["mAP", f"{self.map:.6f}", sum(self.gt_counts.values())])


def evaluate(detections, tracks: list, iou_thresh: float = 0.5,
             speed_window: int = 10) -> EvalReport:
    """detections: object with frame/class_id/score/boxes arrays (see
    postprocess.Detections); tracks: GroundTruthTrack list."""
    strata = speed_stratify(tracks, speed_window)
    classes = sorted({tr.class_id for tr in tracks} | set(int(c) for c in detections.class_ids))
    per_class_ap = {}
    gt_counts = {}
    stratum_ap = {s: {} for s in STRATA}
    stratum_gt = {s: {} for s in STRATA}

    for c in classes:
        gt_rows = []
        for tr in tracks:
            if tr.class_id != c:
                continue
            for f, box in tr.boxes.items():
                gt_rows.append((f, np.asarray(box, np.float64), (tr.track_id, f)))
        n_gt = len(gt_rows)
        gt_counts[c] = n_gt

        det_idx = np.nonzero(detections.class_ids == c)[0]
        order = sorted(det_idx, key=lambda i: (-detections.scores[i], i))
        det_rows = [
            (float(detections.scores[i]), detections.frames[i], detections.boxes[i], int(i))
            for i in order
        ]
        assign = _match_detections(det_rows, gt_rows, iou_thresh)
        flags = [a is not None for a in assign]
        per_class_ap[c] = _ap_from_flags(flags, n_gt)

        for s in STRATA:
            keys_s = {key for _, _, key in gt_rows if strata.get(key) == s}
            stratum_gt[s][c] = len(keys_s)
            # strata are defined on ground truth only: keep detections
            # matched to this stratum, exclude unmatched and other-stratum
            # detections from the ranked list entirely
            flags_s = [True for a in assign if a in keys_s]
            stratum_ap[s][c] = _ap_from_flags(flags_s, len(keys_s))

    present = [c for c in classes if gt_counts.get(c, 0) > 0]
    mean_ap = float(np.mean([per_class_ap[c] for c in present])) if present else 0.0
    strat_map = {}
    stratum_counts = {}
    for s in STRATA:
        with_gt = [c for c in classes if stratum_gt[s].get(c, 0) > 0]
        strat_map[s] = float(np.mean([stratum_ap[s][c] for c in with_gt])) if with_gt else 0.0
        stratum_counts[s] = int(sum(stratum_gt[s].values()))
    return EvalReport(per_class_ap, mean_ap, strat_map, gt_counts, stratum_counts)
