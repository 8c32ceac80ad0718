"""Dense tensors with reverse-mode automatic differentiation.

This is the numerical substrate for the whole package: row-major numpy
buffers, a small set of differentiable operations, and an explicit
recording Tape.  Operations record onto the innermost active tape only
when one of their inputs requires gradients, so inference outside a
``with Tape():`` block carries no bookkeeping cost.

Conventions:
  * dtypes are float32 (training) or float64 (gradient checking);
  * tensors produced by ops are treated as immutable; only the optimizer
    mutates Parameter buffers, between tapes;
  * broadcasting follows numpy's trailing-dimension rule and gradients
    are summed back over the broadcast axes;
  * repeated backward() calls accumulate into .grad until zero_grad();
  * relu'(0) = 0, |x|' at 0 = 0, ties in minimum/maximum split 0.5/0.5
    (matching central finite differences).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

# Opt-in guard: when enabled every op output is scanned for NaN/Inf.
# Off by default to keep the training hot path lean; tests switch it on.
_CHECK_FINITE = False


def set_check_finite(enabled):
    """Enable or disable the per-op NaN/Inf scan. Returns previous value."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _np_dtype(dtype):
    if dtype is None:
        return np.float32
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    return dt.type


class Tensor:
    """A dense n-dimensional value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_np_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return str(self.data.dtype)

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """A defensive copy of the underlying buffer."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, data={head})"

    # Arithmetic sugar; scalars are treated as non-differentiable constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named, trainable leaf tensor.

    Uniqueness of names within a model is enforced by the ParameterStore
    that registers them, not here.
    """

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = str(name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class TapeNode:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


_TAPE_STACK = []


class Tape:
    """Ordered record of executed differentiable operations.

    Nodes are appended in execution order, which is automatically a
    topological order of the computation graph.  A tape is single-owner:
    it is not safe to record onto one tape from multiple threads.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, tape=self)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, dtype=None):
    """Wrap arrays/scalars as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _record(data, inputs, backward_fn):
    """Wrap an op result, registering it on the active tape if needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("operation produced NaN or Inf")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad)
    tape = _active_tape()
    if tape is not None and requires_grad:
        node = TapeNode(out, tuple(inputs), backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    The loss must be a scalar recorded on a tape.  Leaves are tensors
    with requires_grad=True that were not produced by a recorded op
    (Parameters and explicitly created inputs).  Calling backward twice
    without zeroing accumulates, by design.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape is None:
        if loss._node is None:
            raise ContractError(
                "loss was not recorded on any tape; wrap the forward pass in `with Tape():`")
        tape = loss._node.tape
    if not tape.nodes:
        raise ContractError("tape is empty; nothing to differentiate")

    pending = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        grad_out = pending.pop(id(node.out), None)
        if grad_out is None:
            continue
        input_grads = node.backward_fn(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            else:
                seen = pending.get(id(tensor))
                pending[id(tensor)] = grad if seen is None else seen + grad


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_check(a_shape, b_shape, op_name):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op_name}: shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_inputs(a, b, op_name):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        b = Tensor._wrap(np.asarray(b, dtype=a.data.dtype), False)
    else:
        b = as_tensor(b)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op_name}: dtype mismatch {a.dtype} vs {b.dtype}")
    _broadcast_check(a.shape, b.shape, op_name)
    return a, b


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    a, b = _binary_inputs(a, b, "add")

    def bwd(g, a=a, b=b):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _binary_inputs(a, b, "sub")

    def bwd(g, a=a, b=b):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _binary_inputs(a, b, "mul")

    def bwd(g, a=a, b=b):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = _binary_inputs(a, b, "div")

    def bwd(g, a=a, b=b):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(a.data / b.data, (a, b), bwd)


def neg(x):
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g: (-g,))


def scale(x, c):
    """Multiply by a python scalar treated as a constant."""
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * np.asarray(c, dtype=x.data.dtype), (x,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bwd(g, mask=mask):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0), (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g, out=out):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), bwd)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bwd(g, out=out):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), bwd)


def abs_(x):
    """Elementwise absolute value; the subgradient at 0 is 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)

    def bwd(g, sign=sign):
        return (g * sign,)

    return _record(np.abs(x.data), (x,), bwd)


def minimum(a, b):
    a, b = _binary_inputs(a, b, "minimum")
    wa = (a.data < b.data) + 0.5 * (a.data == b.data)

    def bwd(g, wa=wa, a=a, b=b):
        return (_unbroadcast(g * wa, a.data.shape),
                _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _record(np.minimum(a.data, b.data), (a, b), bwd)


def maximum(a, b):
    a, b = _binary_inputs(a, b, "maximum")
    wa = (a.data > b.data) + 0.5 * (a.data == b.data)

    def bwd(g, wa=wa, a=a, b=b):
        return (_unbroadcast(g * wa, a.data.shape),
                _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _record(np.maximum(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def bwd(g, x=x, axes=axes, keepdims=keepdims):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record(np.asarray(data, dtype=x.data.dtype), (x,), bwd)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.data.shape[a]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax and layer normalization (fused, with analytic gradients)


def softmax(x, axis=-1):
    """Numerically stabilized softmax; slices along `axis` sum to 1."""
    x = as_tensor(x)
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, out=out, axis=axis):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bwd(g, gain=gain, inv=inv, xhat=xhat, d=d):
        lead = tuple(range(g.ndim - 1))
        gbias = g.sum(axis=lead)
        ggain = (g * xhat).sum(axis=lead)
        dxhat = g * gain.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product over the last two axes.

    Supported layouts: 2-D x 2-D; stacked a with 2-D b (shared weight);
    stacked a and b with identical leading dimensions.  Leading-dimension
    broadcasting beyond these cases is rejected.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: rank mismatch for {a.shape} x {b.shape}")

    data = a.data @ b.data

    def bwd(g, a=a, b=b):
        ad, bd = a.data, b.data
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            k = ad.shape[-1]
            n = g.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        elif ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.T @ g
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# layout operations


def reshape(x, shape):
    x = as_tensor(x)
    if isinstance(shape, int):
        shape = (shape,)
    data = x.data.reshape(shape)

    def bwd(g, orig=x.data.shape):
        return (g.reshape(orig),)

    return _record(data, (x,), bwd)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    # Copy so downstream code never aliases the source buffer.
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def bwd(g, inverse=inverse):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g, sizes=sizes, axis=axis):
        grads = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            grads.append(g[tuple(sl)].copy())
            start += s
        return tuple(grads)

    return _record(data, tuple(tensors), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; gradient zero-pads back."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) exceeds axis {axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    data = x.data[tuple(sl)].copy()

    def bwd(g, x=x, sl=tuple(sl)):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record(data, (x,), bwd)


def take(x, indices, axis=0):
    """Gather along an axis; the gradient scatter-adds into the source."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("take: indices must be integers")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)].flat[0])
        raise IndexError(f"take: index {bad} out of range [0, {n}) on axis {axis}")
    data = np.take(x.data, idx, axis=axis)

    def bwd(g, x=x, idx=idx, axis=axis):
        gx = np.zeros_like(x.data)
        key = (slice(None),) * axis + (idx,)
        np.add.at(gx, key, g)
        return (gx,)

    return _record(data, (x,), bwd)


def embedding_lookup(table, ids):
    """Gather rows of an embedding table.

    Gradient accumulates into the looked-up rows only; a row used twice
    receives the summed contribution.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise ContractError("embedding_lookup: ids must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)].flat[0])
        raise IndexError(f"embedding id {bad} out of range [0, {vocab})")
    return take(table, idx, axis=0)


def extract_patches(x, kernel, stride, padding):
    """im2col for channel-last images.

    x: (B, H, W, C).  Returns (B, H_out * W_out, C * kernel * kernel)
    with patches laid out channel-major, row-major over the output grid.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"extract_patches: expected (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"extract_patches: kernel {kernel} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    # windows: (B, Hp-k+1, Wp-k+1, C, k, k) -> strided to the output grid
    windows = windows[:, ::stride, ::stride]
    data = windows.reshape(b, h_out * w_out, c * kernel * kernel)

    def bwd(g, x=x, kernel=kernel, stride=stride, padding=padding,
            h_out=h_out, w_out=w_out):
        b, h, w, c = x.shape
        gp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=g.dtype)
        gv = g.reshape(b, h_out, w_out, c, kernel, kernel)
        for ki in range(kernel):
            rows = slice(ki, ki + stride * (h_out - 1) + 1, stride)
            for kj in range(kernel):
                cols = slice(kj, kj + stride * (w_out - 1) + 1, stride)
                gp[:, rows, cols, :] += gv[:, :, :, :, ki, kj]
        if padding:
            gp = gp[:, padding:-padding, padding:-padding, :]
        return (np.ascontiguousarray(gp),)

    return _record(np.ascontiguousarray(data), (x,), bwd)
