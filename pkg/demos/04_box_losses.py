"""IoU, generalized IoU, and the box-regression objective.

GIoU extends IoU with a penalty for the wasted area of the smallest
enclosing box, so even disjoint boxes get a useful gradient.

Run: python demos/04_box_losses.py
"""

import numpy as np

import refbox.tensor as T
from refbox.heads import BoundingBox, LossWeights, giou, iou, total_loss

a = BoundingBox.from_corners(0, 0, 2, 2)
b = BoundingBox.from_corners(1, 0, 3, 2)
print(f"overlapping   : iou={iou(a, b):.4f} (2/6), giou={giou(a, b):.4f}")

a = BoundingBox.from_corners(0, 0, 1, 1)
b = BoundingBox.from_corners(2, 2, 3, 3)
print(f"disjoint      : iou={iou(a, b):.4f}, giou={giou(a, b):.4f} (-7/9)")

# Slide a predicted box across the target and watch the loss surface.
truth = np.array([0.5, 0.5, 0.2, 0.2])
weights = LossWeights()  # l1 weight 5, overlap weight 2
print("\n    cx     L1+GIoU loss   giou")
for cx in np.linspace(0.2, 0.8, 7):
    pred = np.array([cx, 0.5, 0.2, 0.2])
    loss = total_loss(truth, T.Tensor(pred, dtype="float64"), weights)
    print(f"  {cx:.2f}   {loss.item():12.4f}   {giou(pred, truth):+.3f}")

# The loss is differentiable through the prediction.
pred = T.Tensor(np.array([0.3, 0.6, 0.15, 0.25]), dtype="float64", requires_grad=True)
with T.Tape() as tape:
    loss = total_loss(truth, pred, weights)
    T.backward(loss, tape=tape)
print("\nd loss / d (cx, cy, w, h):", pred.grad)
