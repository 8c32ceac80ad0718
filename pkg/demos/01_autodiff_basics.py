"""Tour of the tensor core: tapes, gradients, and finite-difference checks.

Run: python demos/01_autodiff_basics.py
"""

import numpy as np

import refbox.tensor as T
from refbox.gradcheck import grad_check

# Tensors wrap numpy buffers; ops record onto an explicit tape.
w = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
x = T.Tensor(np.array([[0.5], [-1.0]]))

with T.Tape() as tape:
    y = T.matmul(w, x)            # (2, 1)
    loss = T.sum_(T.mul(y, y))    # scalar
    T.backward(loss, tape=tape)

print("loss          :", loss.item())
print("dloss/dw      :\n", w.grad)
print("tape nodes    :", len(tape))

# Gradients accumulate until cleared, by design.
with T.Tape() as tape:
    loss = T.sum_(w)
    T.backward(loss, tape=tape)
print("accumulated   :\n", w.grad)
w.zero_grad()

# Softmax is stabilized by max subtraction: huge logits are fine.
logits = T.Tensor([1000.0, 1000.0, 1000.0])
print("softmax(1e3)  :", T.softmax(logits, axis=0).numpy())

# The finite-difference harness vouches for any composite.
rng = np.random.default_rng(0)
report = grad_check(
    lambda a, b: T.sum_(T.softmax(T.matmul(a, b), axis=-1)),
    [rng.normal(size=(3, 4)), rng.normal(size=(4, 3))],
    labels=["a", "b"])
print("gradcheck     :", report)
