"""Finite-difference verification of tape gradients.

The checker is deliberately independent of the tape: expected gradients
come from central differences of the forward value only, so it can vouch
for any differentiable operation or composite model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward

# Relative error uses a magnitude floor so that gradients smaller than the
# finite-difference noise floor are compared absolutely.
REL_ERR_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    """Per-input comparison of tape gradients against central differences."""

    max_rel_err: float = 0.0
    per_input: list = field(default_factory=list)  # (label, max rel err)
    failures: list = field(default_factory=list)

    def passed(self, tol):
        return self.max_rel_err < tol and not self.failures

    def __str__(self):
        lines = [f"max rel err {self.max_rel_err:.3e}"]
        for label, err in self.per_input:
            lines.append(f"  {label}: {err:.3e}")
        lines.extend(self.failures)
        return "\n".join(lines)


def _rel_err(fd, ad):
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), REL_ERR_FLOOR)
    return np.abs(fd - ad) / denom


def grad_check(f, inputs, step=1e-5, labels=None, sample=None, rng=None):
    """Compare tape gradients of scalar-valued `f` with central differences.

    f       : callable taking len(inputs) Tensors, returning a scalar Tensor.
              Must be deterministic.
    inputs  : list of array-likes; each becomes a float64 leaf with
              requires_grad=True.
    step    : finite-difference half-step.
    sample  : if set, check at most this many randomly chosen coordinates
              per input instead of every coordinate.
    rng     : numpy Generator used when sampling coordinates.

    Returns a GradCheckReport; failures list NaN/shape problems, and
    max_rel_err is the worst coordinate over all inputs.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), dtype="float64", requires_grad=True)
               for a in inputs]
    if labels is None:
        labels = [f"input[{i}]" for i in range(len(tensors))]

    with Tape() as tape:
        out = f(*tensors)
        if out.data.shape != ():
            raise ValueError(f"grad_check expects a scalar output, got shape {out.shape}")
        backward(out, tape=tape)

    analytic = []
    for t, label in zip(tensors, labels):
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad)

    report = GradCheckReport()
    for t, ad, label in zip(tensors, analytic, labels):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=sample, replace=False)
        worst = 0.0
        for j in coords:
            original = flat[j]
            flat[j] = original + step
            hi = f(*tensors).item()
            flat[j] = original - step
            lo = f(*tensors).item()
            flat[j] = original
            fd = (hi - lo) / (2.0 * step)
            ad_j = ad.reshape(-1)[j]
            if not (np.isfinite(fd) and np.isfinite(ad_j)):
                report.failures.append(f"{label}[{j}]: non-finite gradient (fd={fd}, tape={ad_j})")
                continue
            worst = max(worst, float(_rel_err(fd, ad_j)))
        report.per_input.append((label, worst))
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
