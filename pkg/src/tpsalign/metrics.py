"""Saliency evaluation: adaptive F-measure, S-measure and adaptive E-measure.

All three take a prediction in [0, 1] and a binary ground truth of the same
size and return a score in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

EPS = 1e-8
BETA2 = 0.3
ALPHA = 0.5


def _check(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim != 2 or pred.size == 0:
        raise InvalidArgumentError(f"expected non-empty 2-D maps, got {pred.shape}")
    if not np.all(np.isfinite(pred)) or pred.min() < 0 or pred.max() > 1:
        raise InvalidArgumentError("prediction must lie in [0, 1]")
    gt = gt.astype(float)
    if not np.all((gt == 0) | (gt == 1)):
        raise InvalidArgumentError("ground truth must be binary (0/1)")
    return pred, gt


def adaptive_threshold(pred):
    """Twice the mean saliency, capped just below 1 and floored just above 0.

    The floor keeps an all-zero map from binarizing to all-foreground.
    """
    return float(np.clip(2.0 * pred.mean(), EPS, 1.0 - EPS))


def binarize(pred):
    return (pred >= adaptive_threshold(pred)).astype(float)


def f_measure(pred, gt):
    pred, gt = _check(pred, gt)
    b = binarize(pred)
    if gt.sum() == 0 and b.sum() == 0:
        return 1.0
    tp = float(np.sum(b * gt))
    precision = tp / (b.sum() + EPS)
    recall = tp / (gt.sum() + EPS)
    return (1 + BETA2) * precision * recall / (BETA2 * precision + recall + EPS)


def _object_score(x, mask):
    vals = x[mask]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(pred, gt):
    fg_mask = gt == 1
    bg_mask = ~fg_mask
    u = fg_mask.mean()
    fg = _object_score(pred, fg_mask)
    bg = _object_score(1.0 - pred, bg_mask)
    return u * fg + (1 - u) * bg


def _ssim(x, y):
    n = x.size
    mx, my = x.mean(), y.mean()
    d = max(n - 1, 1)
    sx = np.sum((x - mx) ** 2) / d
    sy = np.sum((y - my) ** 2) / d
    sxy = np.sum((x - mx) * (y - my)) / d
    a = 4.0 * mx * my * sxy
    b = (mx * mx + my * my) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(gt):
    # 1-based centroid rounded half away from zero, as in the reference MATLAB code
    rows, cols = np.nonzero(gt)
    return int(np.floor(rows.mean() + 1.5)), int(np.floor(cols.mean() + 1.5))


def _s_region(pred, gt):
    h, w = gt.shape
    cy, cx = _centroid(gt)
    total = float(h * w)
    score = 0.0
    for rs in (slice(0, cy), slice(cy, h)):
        for cs in (slice(0, cx), slice(cx, w)):
            g = gt[rs, cs]
            if g.size == 0:
                continue
            score += g.size / total * _ssim(pred[rs, cs], g)
    return score


def s_measure(pred, gt):
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    s = ALPHA * _s_object(pred, gt) + (1 - ALPHA) * _s_region(pred, gt)
    return float(np.clip(s, 0.0, 1.0))


def e_measure(pred, gt):
    pred, gt = _check(pred, gt)
    b = binarize(pred)
    y = gt.mean()
    if y == 0:
        return float(1.0 - b.mean())
    if y == 1:
        return float(b.mean())
    phi_p = b - b.mean()
    phi_g = gt - y
    align = 2.0 * phi_p * phi_g / (phi_p * phi_p + phi_g * phi_g + EPS)
    return float(np.mean((align + 1.0) ** 2 / 4.0))


@dataclass
class MetricReport:
    """Per-image scores plus their unweighted means."""

    names: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # (Fm, Sm, Em) per image

    def add(self, name, pred, gt):
        scores = (f_measure(pred, gt), s_measure(pred, gt), e_measure(pred, gt))
        self.names.append(name)
        self.rows.append(scores)
        return scores

    @property
    def mean(self):
        if not self.rows:
            return (float("nan"),) * 3
        return tuple(float(v) for v in np.mean(np.asarray(self.rows), axis=0))

    def to_csv(self):
        lines = ["name,Fm,Sm,Em"]
        for name, (f, s, e) in zip(self.names, self.rows):
            lines.append(f"{name},{f:.6f},{s:.6f},{e:.6f}")
        f, s, e = self.mean
        lines.append(f"mean,{f:.6f},{s:.6f},{e:.6f}")
        return "\n".join(lines) + "\n"
