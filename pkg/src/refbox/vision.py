"""Image-side tokenization: a small trainable convolutional backbone, the
flatten-to-tokens step, and learned positional embeddings.

The backbone is a stack of 3x3 stride-2 conv blocks (one per factor of 2
in the output stride), each followed by per-position layer normalization
over channels and a ReLU, with a final 1x1 projection to the model width.
Normalization is batch-free so single-sample runs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .layers import LayerNorm, Linear, glorot_uniform


def backbone_widths(stride, dim, floor=16):
    """Channel plan: full width for the last two blocks, halved per step
    before that, with a floor that keeps early blocks informative."""
    n_blocks = int(round(np.log2(stride)))
    if 2 ** n_blocks != stride:
        raise ConfigError(f"stride {stride} must be a power of two")
    return [max(floor, min(dim, dim >> max(0, n_blocks - 2 - i)))
            for i in range(n_blocks)]


@dataclass
class VisualTokens:
    """Flattened feature-map cells in row-major grid order.

    tokens: (B, T_v, d) Tensor; provenance maps token index -> (row, col).
    """

    tokens: T.Tensor
    grid: tuple
    provenance: list = field(default_factory=list)

    @property
    def n_tokens(self):
        return self.tokens.shape[-2]


class Backbone:
    """Configurable conv stack producing a (H/s, W/s, d) feature map."""

    def __init__(self, store, rng, name, stride, dim, in_channels=3, widths=None):
        self.stride = stride
        self.dim = dim
        self.in_channels = in_channels
        self.widths = list(widths) if widths is not None else backbone_widths(stride, dim)
        n_blocks = int(round(np.log2(stride)))
        if 2 ** n_blocks != stride:
            raise ConfigError(f"stride {stride} must be a power of two")
        if len(self.widths) != n_blocks:
            raise ConfigError(f"need {n_blocks} block widths for stride {stride}, got {len(self.widths)}")
        self.blocks = []
        c_in = in_channels
        for i, c_out in enumerate(self.widths):
            lin = Linear(store, rng, f"{name}.block{i}.conv", c_in * 9, c_out)
            norm = LayerNorm(store, f"{name}.block{i}.norm", c_out)
            self.blocks.append((lin, norm))
            c_in = c_out
        self.proj = Linear(store, rng, f"{name}.proj", c_in, dim)

    def __call__(self, images):
        """images: (B, 3, H, W) or (3, H, W), values in [0, 1]."""
        x = T.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise InputError(f"expected (B, {self.in_channels}, H, W) images, got {x.shape}")
        _, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise InputError(
                f"image size {w}x{h} not divisible by backbone stride {self.stride}")
        # Center pixel values so the (gray) background maps near zero and
        # object pixels carry the signal.
        x = T.add(x, -0.5)
        x = T.transpose(x, (0, 2, 3, 1))  # channel-last
        for lin, norm in self.blocks:
            b, hh, ww, _ = x.shape
            patches = T.extract_patches(x, kernel=3, stride=2, padding=1)
            z = T.relu(norm(lin(patches)))
            x = T.reshape(z, (b, hh // 2, ww // 2, z.shape[-1]))
        fmap = self.proj(x)  # (B, H/s, W/s, d)
        return T.reshape(fmap, fmap.shape[1:]) if single else fmap


def tokenize_features(fmap):
    """Flatten a (B, H', W', d) feature map to row-major tokens."""
    f = T.as_tensor(fmap)
    single = f.ndim == 3
    if single:
        f = T.reshape(f, (1,) + f.shape)
    b, rows, cols, d = f.shape
    tokens = T.reshape(f, (b, rows * cols, d))
    if single:
        tokens = T.reshape(tokens, (rows * cols, d))
    provenance = [(r, c) for r in range(rows) for c in range(cols)]
    return VisualTokens(tokens=tokens, grid=(rows, cols), provenance=provenance)


def untokenize(tokens, grid):
    """Inverse of tokenize_features for roundtrip checks."""
    t = T.as_tensor(tokens)
    rows, cols = grid
    if t.ndim == 2:
        return T.reshape(t, (rows, cols, t.shape[-1]))
    return T.reshape(t, (t.shape[0], rows, cols, t.shape[-1]))


def sine_position_table(rows, cols, dim, gain=0.25):
    """Fixed 2-D sine/cosine layout: half the channels encode the row
    coordinate, half the column, over a geometric frequency ladder.
    Low-frequency channels are monotone in position, so coordinates are
    linearly readable.  The gain keeps position from drowning out content
    in the attention keys."""
    half = dim // 2
    n_freq = half // 2
    table = np.zeros((rows * cols, dim))
    freqs = np.pi * (2.0 ** np.arange(n_freq)) / 2.0
    ys = (np.arange(rows) + 0.5) / rows
    xs = (np.arange(cols) + 0.5) / cols
    yy = np.repeat(ys, cols)
    xx = np.tile(xs, rows)
    for k, w in enumerate(freqs):
        table[:, 2 * k] = np.sin(w * yy)
        table[:, 2 * k + 1] = np.cos(w * yy)
        table[:, half + 2 * k] = np.sin(w * xx)
        table[:, half + 2 * k + 1] = np.cos(w * xx)
    return gain * table


class PositionalEmbedding:
    """One learnable row per grid cell, added to the visual tokens.

    Initialized with a sine/cosine coordinate code (rather than noise) so
    that box-coordinate readout is well-conditioned from the start; the
    rows remain ordinary trainable parameters.
    """

    def __init__(self, store, rng, name, n_tokens, dim, grid=None):
        if grid is None:
            side = int(round(np.sqrt(n_tokens)))
            grid = (side, n_tokens // side)
        rows, cols = grid
        if rows * cols != n_tokens:
            raise ConfigError(f"grid {grid} does not cover {n_tokens} tokens")
        self.table = store.create(f"{name}.table", sine_position_table(rows, cols, dim))

    def __call__(self, visual):
        tokens = visual.tokens
        if tokens.shape[-2] != self.table.shape[0]:
            raise ConfigError(
                f"positional table rows {self.table.shape[0]} != token count {tokens.shape[-2]}")
        return VisualTokens(tokens=T.add(tokens, self.table),
                            grid=visual.grid, provenance=visual.provenance)
