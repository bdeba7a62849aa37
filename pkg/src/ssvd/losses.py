"""Training losses and their analytic gradients (all math in float64).

Per anchor j with label l*_j, every class channel contributes focal loss
(positive for the channel matching l*_j, negative otherwise); foreground
anchors add smooth-L1 on the box deltas. Both streams are summed and the
total is divided by max(num_foreground, 1). Ignore anchors contribute
nothing anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

P_CLAMP = 1e-7


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def focal_loss(p, positive, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Elementwise focal term on probabilities; p is clamped to
    [1e-7, 1 - 1e-7]. positive is a boolean array."""
    p = np.clip(np.asarray(p, np.float64), P_CLAMP, 1.0 - P_CLAMP)
    positive = np.asarray(positive, bool)
    pos_term = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg_term = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    return np.where(positive, pos_term, neg_term)


def focal_loss_grad_z(z, positive, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """d(focal)/d(logit) with p = sigmoid(z); zero where the clamp is active."""
    z = np.asarray(z, np.float64)
    p = sigmoid(z)
    dp = p * (1.0 - p)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        dpos = alpha * (gamma * q ** (gamma - 1.0) * np.log(np.maximum(p, P_CLAMP))
                        - q ** gamma / np.maximum(p, P_CLAMP))
        dneg = (1.0 - alpha) * (gamma * p ** (gamma - 1.0) * (-np.log(np.maximum(q, P_CLAMP)))
                                + p ** gamma / np.maximum(q, P_CLAMP))
    grad = np.where(np.asarray(positive, bool), dpos, dneg) * dp
    clamped = (p < P_CLAMP) | (p > 1.0 - P_CLAMP)
    return np.where(clamped, 0.0, grad)


def smooth_l1(d) -> np.ndarray:
    """0.5 d^2 for |d| < 1, else |d| - 0.5 (elementwise)."""
    d = np.abs(np.asarray(d, np.float64))
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def smooth_l1_grad(d) -> np.ndarray:
    d = np.asarray(d, np.float64)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


@dataclass
class LossBreakdown:
    focal_motion: float
    focal_sampling: float
    loc_motion: float
    loc_sampling: float
    num_foreground: int

    @property
    def total(self) -> float:
        return (self.focal_motion + self.focal_sampling
                + self.loc_motion + self.loc_sampling) / max(self.num_foreground, 1)

    def to_dict(self) -> dict:
        return {
            "focal_motion": self.focal_motion,
            "focal_sampling": self.focal_sampling,
            "loc_motion": self.loc_motion,
            "loc_sampling": self.loc_sampling,
            "num_foreground": self.num_foreground,
            "total": self.total,
        }


def _stream_terms(logits, deltas, labels, target_deltas, alpha, gamma):
    """Raw focal and localization sums for one stream."""
    logits = np.asarray(logits, np.float64)
    n, k = logits.shape
    keep = labels >= 0  # drop ignore anchors
    cls_ids = np.arange(1, k + 1)[None, :]
    positive = labels[:, None] == cls_ids
    p = sigmoid(logits[keep])
    focal = float(np.sum(focal_loss(p, positive[keep], alpha, gamma)))
    fg = labels >= 1
    loc = float(np.sum(smooth_l1(np.asarray(deltas, np.float64)[fg] - target_deltas[fg])))
    return focal, loc


def total_loss(motion_out, sampling_out, labels, target_deltas,
               alpha: float = 0.25, gamma: float = 2.0) -> LossBreakdown:
    """motion_out/sampling_out are ((n, k) logits, (n, 4) deltas) tuples in
    anchor order; labels: -1 ignore / 0 background / >=1 class id."""
    labels = np.asarray(labels, np.int64)
    target_deltas = np.asarray(target_deltas, np.float64)
    fm, lm = _stream_terms(*motion_out, labels, target_deltas, alpha, gamma)
    fs, ls = _stream_terms(*sampling_out, labels, target_deltas, alpha, gamma)
    n_fg = int(np.count_nonzero(labels >= 1))
    return LossBreakdown(fm, fs, lm, ls, n_fg)


def loss_gradients(motion_out, sampling_out, labels, target_deltas,
                   alpha: float = 0.25, gamma: float = 2.0) -> dict:
    """Analytic d(total)/d(logits) and d(total)/d(deltas) per stream."""
    labels = np.asarray(labels, np.int64)
    target_deltas = np.asarray(target_deltas, np.float64)
    norm = 1.0 / max(int(np.count_nonzero(labels >= 1)), 1)
    out = {}
    for name, (logits, deltas) in (("motion", motion_out), ("sampling", sampling_out)):
        logits = np.asarray(logits, np.float64)
        deltas = np.asarray(deltas, np.float64)
        n, k = logits.shape
        positive = labels[:, None] == np.arange(1, k + 1)[None, :]
        g_log = focal_loss_grad_z(logits, positive, alpha, gamma) * norm
        g_log[labels < 0] = 0.0
        g_del = np.zeros_like(deltas)
        fg = labels >= 1
        g_del[fg] = smooth_l1_grad(deltas[fg] - target_deltas[fg]) * norm
        out[name] = {"logits": g_log, "deltas": g_del}
    return out
