"""Parameter registry and small reusable layers built on the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter

LN_EPS = 1e-5


class ParameterStore:
    """Insertion-ordered registry of uniquely named Parameters."""

    def __init__(self, dtype="float32"):
        self._params = {}
        self.dtype = dtype

    def create(self, name, data):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(np.asarray(data), name, dtype=self.dtype)
        self._params[name] = p
        return p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __contains__(self, name):
        return name in self._params

    def get(self, name):
        return self._params[name]

    def names(self):
        return list(self._params)

    def n_scalars(self):
        return sum(p.size for p in self)

    def zero_grad(self):
        for p in self:
            p.grad = None

    def buffer_hash(self):
        """Content hash of all parameter buffers, for mutation checks."""
        import hashlib

        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x @ w + b with w of shape (fan_in, fan_out).

    init_scale shrinks the Glorot bounds; residual-branch output layers
    use a small scale so fresh layers start close to transparent.
    """

    def __init__(self, store, rng, name, fan_in, fan_out, bias=True, init_scale=1.0):
        self.w = store.create(f"{name}.w",
                              init_scale * glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
        self.b = store.create(f"{name}.b", np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class LayerNorm:
    """Learnable layer normalization over the last dimension."""

    def __init__(self, store, name, dim, eps=LN_EPS):
        self.gain = store.create(f"{name}.gain", np.ones(dim))
        self.bias = store.create(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class FeedForward:
    """Two-layer position-wise network with a ReLU between."""

    def __init__(self, store, rng, name, dim, hidden):
        self.lin1 = Linear(store, rng, f"{name}.lin1", dim, hidden)
        self.lin2 = Linear(store, rng, f"{name}.lin2", hidden, dim)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))
