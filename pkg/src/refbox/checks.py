"""Derivative test suites: per-operation and whole-model finite-difference
checks, shared by the CLI `gradcheck` command and the acceptance tests.

Random inputs are kept a safe distance from the kinks of relu/abs/min/max
so central differences stay meaningful; the conventions at the kink
itself (gradient 0 at relu(0) and |0|, half weight on ties) are fixed by
the tensor core and asserted in the unit tests instead.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .heads import total_loss
from .model import GroundingModel, ModelConfig

GRAD_TOL = 1e-4
FD_STEP = 1e-5

# Tiny-but-complete model: width 8, 2 heads, 1 layer, 2x2 token grid,
# 2 textual tokens.
TINY_CONFIG = dict(dim=8, n_heads=2, n_layers=1, n_text_tokens=2,
                   image_size=8, stride=4, backbone_widths=(4, 4))


def _away_from_zero(rng, shape, low=0.05, high=1.0):
    mag = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag * sign


def op_gradient_checks(n_seeds=20, tol=GRAD_TOL):
    """Run every differentiable op through finite differences.

    Returns a list of (op name, worst rel err over n_seeds, passed).
    """
    results = []

    def run(name, build):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng((hash(name) & 0xFFFF) * 1000 + seed)
            f, inputs = build(rng)
            report = grad_check(f, inputs, step=FD_STEP)
            worst = max(worst, report.max_rel_err)
            if report.failures:
                worst = float("inf")
        results.append((name, worst, worst < tol))

    def rand_dims(rng, n, lo=1, hi=5):
        return tuple(int(rng.integers(lo, hi)) for _ in range(n))

    def reduce_all(op):
        return lambda *ts: T.sum_(T.mul(op(*ts), 1.0))

    # matmul in its three supported layouts
    run("matmul_2d", lambda rng: (
        lambda a, b: T.sum_(T.matmul(a, b)),
        [rng.normal(size=(rng.integers(1, 5), 4)), rng.normal(size=(4, rng.integers(1, 5)))]))
    run("matmul_batched", lambda rng: (
        lambda a, b: T.sum_(T.matmul(a, b)),
        [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))]))
    run("matmul_shared_weight", lambda rng: (
        lambda a, b: T.sum_(T.matmul(a, b)),
        [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]))

    # elementwise with broadcast
    run("add_broadcast", lambda rng: (
        lambda a, b: T.sum_(T.add(a, b)),
        [rng.normal(size=(3, 2, 4)), rng.normal(size=(4,))]))
    run("sub", lambda rng: (
        lambda a, b: T.sum_(T.sub(a, b)),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    run("mul_broadcast", lambda rng: (
        lambda a, b: T.sum_(T.mul(a, b)),
        [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]))
    run("div", lambda rng: (
        lambda a, b: T.sum_(T.div(a, b)),
        [rng.normal(size=(3, 3)), _away_from_zero(rng, (3, 3), low=0.5, high=2.0)]))
    run("neg", lambda rng: (
        lambda a: T.sum_(T.neg(a)), [rng.normal(size=rand_dims(rng, 2))]))
    run("scale", lambda rng: (
        lambda a: T.sum_(T.scale(a, 2.5)), [rng.normal(size=(4, 3))]))

    # nonlinearities, inputs kept off the kinks
    run("relu", lambda rng: (
        lambda a: T.sum_(T.relu(a)), [_away_from_zero(rng, (4, 5))]))
    run("sigmoid", lambda rng: (
        lambda a: T.sum_(T.sigmoid(a)), [rng.normal(size=(4, 5))]))
    run("tanh", lambda rng: (
        lambda a: T.sum_(T.tanh(a)), [rng.normal(size=(4, 5))]))
    run("abs", lambda rng: (
        lambda a: T.sum_(T.abs_(a)), [_away_from_zero(rng, (4, 5))]))
    run("minimum", lambda rng: (
        lambda a, b: T.sum_(T.minimum(a, b)),
        [rng.normal(size=(4, 4)), rng.normal(size=(4, 4)) + 0.3]))
    run("maximum", lambda rng: (
        lambda a, b: T.sum_(T.maximum(a, b)),
        [rng.normal(size=(4, 4)), rng.normal(size=(4, 4)) + 0.3]))

    # reductions
    run("sum_axis", lambda rng: (
        lambda a: T.sum_(T.mul(T.sum_(a, axis=1), T.sum_(a, axis=1))),
        [rng.normal(size=(3, 4, 2))]))
    run("mean", lambda rng: (
        lambda a: T.sum_(T.mul(T.mean(a, axis=-1), T.mean(a, axis=-1))),
        [rng.normal(size=(3, 5))]))

    # softmax / layer norm
    run("softmax", lambda rng: (
        (lambda c: (lambda a: T.sum_(T.mul(T.softmax(a, axis=-1), c))))(
            T.as_tensor(rng.normal(size=(3, 5)), dtype="float64")),
        [rng.normal(size=(3, 5))]))
    run("softmax_axis0", lambda rng: (
        (lambda c: (lambda a: T.sum_(T.mul(T.softmax(a, axis=0), c))))(
            T.as_tensor(rng.normal(size=(4, 3)), dtype="float64")),
        [rng.normal(size=(4, 3))]))
    run("layer_norm", lambda rng: (
        lambda x, g, b: T.sum_(T.mul(T.layer_norm(x, g, b), 1.0)),
        [rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8)]))

    # layout ops, composed with a weighting so gradients are non-uniform
    def weighted(rng, op, in_shape, out_shape, extra=()):
        c = T.as_tensor(rng.normal(size=out_shape), dtype="float64")
        return (lambda a: T.sum_(T.mul(op(a), c)), [rng.normal(size=in_shape)])

    run("reshape", lambda rng: weighted(rng, lambda a: T.reshape(a, (6,)), (2, 3), (6,)))
    run("transpose", lambda rng: weighted(
        rng, lambda a: T.transpose(a, (1, 0, 2)), (2, 3, 4), (3, 2, 4)))
    run("concat", lambda rng: (
        (lambda c: (lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=1), c))))(
            T.as_tensor(rng.normal(size=(2, 5)), dtype="float64")),
        [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]))
    run("narrow", lambda rng: weighted(
        rng, lambda a: T.narrow(a, 1, 1, 2), (3, 4), (3, 2)))
    run("take", lambda rng: weighted(
        rng, lambda a: T.take(a, np.array([0, 2, 2]), axis=0), (4, 3), (3, 3)))
    run("embedding_lookup", lambda rng: weighted(
        rng, lambda a: T.embedding_lookup(a, np.array([1, 1, 0, 3])), (5, 4), (4, 4)))
    run("extract_patches", lambda rng: weighted(
        rng, lambda a: T.extract_patches(a, 3, 2, 1), (1, 6, 6, 2), (1, 9, 18)))

    return results


def build_tiny_model(seed, vocab_size=8):
    config = ModelConfig(**TINY_CONFIG)
    return GroundingModel(config, vocab_size, seed=seed, dtype="float64")


def tiny_model_inputs(seed, vocab_size=8, max_len=4):
    rng = np.random.default_rng(10_000 + seed)
    images = rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))
    length = int(rng.integers(2, max_len + 1))
    ids = np.zeros((1, max_len), dtype=np.int64)
    ids[0, :length] = rng.integers(2, vocab_size, size=length)
    lengths = np.array([length])
    target = np.concatenate([rng.uniform(0.3, 0.7, size=2), rng.uniform(0.1, 0.3, size=2)])
    return images, ids, lengths, target[None, :]


def model_gradient_check(seed, coords_per_param=None, step=FD_STEP):
    """Finite-difference every (or a sampled subset of) model parameter
    through the full image+text -> loss graph at float64.

    Returns (worst rel err, worst parameter name).
    """
    model = build_tiny_model(seed)
    images, ids, lengths, target = tiny_model_inputs(seed)

    def loss_fn():
        out = model.forward(T.as_tensor(images, dtype="float64"), ids, lengths)
        return total_loss(target, out.box)

    model.store.zero_grad()
    with T.Tape() as tape:
        T.backward(loss_fn(), tape=tape)

    rng = np.random.default_rng(20_000 + seed)
    worst, worst_name = 0.0, None
    for p in model.store:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        coords = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            coords = rng.choice(flat.size, size=coords_per_param, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn().item()
            flat[j] = orig - step
            lo = loss_fn().item()
            flat[j] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-5)
            if err > worst:
                worst, worst_name = err, f"{p.name}[{j}]"
    return worst, worst_name


def run_gradient_suite(n_seeds=20, tol=GRAD_TOL, log=print, sample=None):
    """Op suite over n_seeds, one exhaustive model check, and sampled
    model checks for the remaining seeds.  Returns True when everything
    stays under tol.  `sample` forces that many coordinates per parameter
    for every model seed (useful for quick smoke runs)."""
    ok = True
    for name, worst, passed in op_gradient_checks(n_seeds=n_seeds, tol=tol):
        ok &= passed
        log(f"op {name:22s} max rel err {worst:.3e}  {'ok' if passed else 'FAIL'}")
    for seed in range(n_seeds):
        coords = sample if sample is not None else (None if seed == 0 else 4)
        worst, where = model_gradient_check(seed, coords_per_param=coords)
        passed = worst < tol
        ok &= passed
        scope = "all coords" if coords is None else f"{coords}/param"
        log(f"model seed {seed:2d} ({scope:10s}) max rel err {worst:.3e} at {where}  "
            f"{'ok' if passed else 'FAIL'}")
    return ok
