"""Box regression head, IoU/GIoU metrics, and the training objective.

Boxes are (cx, cy, w, h), normalized to [0, 1] as fractions of the image
side.  The float metrics here are evaluation tools; `total_loss` is the
differentiable objective used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import Linear

# Guard for the enclosing-box denominator so exactly-touching boxes
# cannot divide by zero.
GIOU_EPS = 1e-9


@dataclass
class BoundingBox:
    """Center-format box with sides normalized to the image."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ContractError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractError(f"box sides ({self.w}, {self.h}) outside (0, 1]")
        return self

    def corners(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def to_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


@dataclass
class LossWeights:
    """Coefficients for the L1 and box-overlap terms."""

    l1: float = 5.0
    iou: float = 2.0

    def validate(self):
        if self.l1 < 0 or self.iou < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.l1 == 0 and self.iou == 0:
            raise ContractError("loss weights cannot both be zero")
        return self


def _corners(box):
    if isinstance(box, BoundingBox):
        return np.asarray(box.corners(), dtype=np.float64)
    arr = np.asarray(box, dtype=np.float64)
    if arr.shape != (4,):
        raise ContractError(f"expected a 4-vector (cx, cy, w, h), got shape {arr.shape}")
    cx, cy, w, h = arr
    return np.array([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0])


def iou(a, b):
    """Intersection over union. Degenerate zero-area boxes score 0."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area_a + area_b - inter
    return float(inter / union)


def giou(a, b):
    """Generalized IoU: IoU minus the wasted fraction of the enclosing box."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area_a + area_b - inter
    base = iou(a, b)
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    area_c = cw * ch
    return float(base - (area_c - union) / (area_c + GIOU_EPS))


def _col(t, j):
    return T.narrow(t, -1, j, 1)


def giou_tensor(pred, truth):
    """Differentiable GIoU between (B, 4) center-format tensors.

    `truth` may be a constant array; the gradient flows through `pred`.
    """
    pred = T.as_tensor(pred)
    truth = T.as_tensor(truth, dtype=pred.dtype)
    if pred.ndim == 1:
        pred = T.reshape(pred, (1, 4))
    if truth.ndim == 1:
        truth = T.reshape(truth, (1, 4))

    def corners(b):
        cx, cy, w, h = (_col(b, j) for j in range(4))
        hw, hh = T.scale(w, 0.5), T.scale(h, 0.5)
        return T.sub(cx, hw), T.sub(cy, hh), T.add(cx, hw), T.add(cy, hh), w, h

    ax1, ay1, ax2, ay2, aw, ah = corners(pred)
    bx1, by1, bx2, by2, bw, bh = corners(truth)
    iw = T.relu(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)))
    ih = T.relu(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)))
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(aw, ah), T.mul(bw, bh)), inter)
    overlap = T.div(inter, union)
    cw = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    ch = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    area_c = T.mul(cw, ch)
    waste = T.div(T.sub(area_c, union), T.add(area_c, GIOU_EPS))
    return T.sub(overlap, waste)


def total_loss(truth, pred, weights=None):
    """Weighted L1 + (1 - GIoU) objective, averaged over the batch.

    truth : ground-truth boxes, (B, 4) or (4,), constant.
    pred  : predicted boxes as a Tensor, same shape.
    """
    weights = (weights or LossWeights()).validate()
    pred = T.as_tensor(pred)
    truth_arr = np.asarray(truth.data if isinstance(truth, T.Tensor) else truth)
    truth_c = T.as_tensor(truth_arr.reshape(-1, 4), dtype=pred.dtype)
    pred2 = T.reshape(pred, (-1, 4))
    l1_per_sample = T.sum_(T.abs_(T.sub(truth_c, pred2)), axis=-1)
    g = giou_tensor(pred2, truth_c)
    giou_gap = T.sub(T.as_tensor(np.ones_like(g.data)), g)
    per_sample = T.add(T.scale(l1_per_sample, weights.l1),
                       T.scale(T.reshape(giou_gap, l1_per_sample.shape), weights.iou))
    return T.mean(per_sample)


def accuracy_at_05(predictions, ground_truths, threshold=0.5):
    """Fraction of prediction/truth pairs with IoU above the threshold."""
    preds = list(predictions)
    truths = list(ground_truths)
    if len(preds) != len(truths):
        raise ContractError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ContractError("accuracy over an empty list is undefined")
    hits = sum(1 for p, t in zip(preds, truths) if iou(p, t) > threshold)
    return hits / len(preds)


class PredictionHead:
    """Flatten the decoder outputs and regress a normalized box.

    Two fully connected layers with a ReLU between; a final sigmoid keeps
    every coordinate strictly inside (0, 1).
    """

    def __init__(self, store, rng, name, n_queries, dim, hidden=None):
        hidden = hidden or dim
        self.n_queries = n_queries
        self.dim = dim
        self.lin1 = Linear(store, rng, f"{name}.lin1", n_queries * dim, hidden)
        self.lin2 = Linear(store, rng, f"{name}.lin2", hidden, 4)
        # Start at a centered, smaller-than-half-image box: sigmoid of
        # (0, 0, -1.4, -1.4) is (0.5, 0.5, ~0.2, ~0.2).
        self.lin2.b.data[2:] = -1.4

    def __call__(self, z):
        z = T.as_tensor(z)
        single = z.ndim == 2
        if single:
            z = T.reshape(z, (1,) + z.shape)
        b = z.shape[0]
        flat = T.reshape(z, (b, self.n_queries * self.dim))
        box = T.sigmoid(self.lin2(T.relu(self.lin1(flat))))
        # Keep coordinates strictly inside (0, 1) even when the sigmoid
        # saturates to an exact 0/1 in floating point.
        box = T.minimum(T.maximum(box, 1e-6), 1.0 - 1e-6)
        return T.reshape(box, (4,)) if single else box
