"""Backbone shape/scale contracts, tokenization layout, positional table."""

import numpy as np
import pytest

import refbox.tensor as T
from refbox.errors import ConfigError, InputError
from refbox.layers import ParameterStore
from refbox.vision import (Backbone, PositionalEmbedding, backbone_widths,
                           sine_position_table, tokenize_features, untokenize)

from test_text import fd_check_params


def make_backbone(stride, dim, widths=None, seed=0, dtype="float64"):
    store = ParameterStore(dtype)
    bb = Backbone(store, np.random.default_rng(seed), "backbone", stride, dim,
                  widths=widths)
    return bb, store


class TestBackbone:
    def test_desk_shape(self):
        bb, _ = make_backbone(16, 32, dtype="float32")
        img = np.random.default_rng(0).uniform(0, 1, size=(1, 3, 128, 128)).astype(np.float32)
        fmap = bb(T.Tensor(img))
        assert fmap.shape == (1, 8, 8, 32)

    def test_reference_shape(self):
        # Stride 32 on a 512x512 input gives a 16x16 grid.
        bb, _ = make_backbone(32, 64, dtype="float32")
        img = np.zeros((1, 3, 512, 512), dtype=np.float32)
        assert bb(T.Tensor(img)).shape == (1, 16, 16, 64)

    def test_indivisible_input_rejected(self):
        bb, _ = make_backbone(16, 16)
        with pytest.raises(InputError) as err:
            bb(T.Tensor(np.zeros((1, 3, 100, 128))))
        msg = str(err.value)
        assert "100" in msg and "16" in msg

    def test_single_image_convenience(self):
        bb, _ = make_backbone(4, 8, widths=(16, 16))
        out = bb(T.Tensor(np.zeros((3, 16, 16))))
        assert out.shape == (4, 4, 8)

    def test_deterministic(self):
        bb, _ = make_backbone(4, 8, widths=(16, 16))
        img = T.Tensor(np.random.default_rng(1).uniform(size=(2, 3, 16, 16)))
        assert np.array_equal(bb(img).numpy(), bb(img).numpy())

    def test_feature_scale_sane_at_init(self):
        for seed in range(5):
            bb, _ = make_backbone(16, 32, seed=seed, dtype="float32")
            img = np.random.default_rng(seed).uniform(0, 1, size=(2, 3, 64, 64))
            std = bb(T.Tensor(img.astype(np.float32))).numpy().std()
            assert 1e-3 < std < 1e3

    def test_gradient_through_two_blocks(self):
        bb, store = make_backbone(4, 8, widths=(6, 6))
        img = np.random.default_rng(2).uniform(0, 1, size=(1, 3, 8, 8))
        rng = np.random.default_rng(3)
        w = T.as_tensor(rng.normal(size=(1, 2, 2, 8)), dtype="float64")

        def loss_fn():
            return T.sum_(T.mul(bb(T.as_tensor(img, dtype="float64")), w))

        assert fd_check_params(loss_fn, store, coords_per_param=5) < 1e-4

    def test_width_plan(self):
        assert backbone_widths(16, 64) == [16, 32, 64, 64]
        assert backbone_widths(32, 256) == [32, 64, 128, 256, 256]
        with pytest.raises(ConfigError):
            backbone_widths(12, 64)


class TestTokenize:
    def test_row_major_order(self):
        fmap = np.arange(2 * 2 * 3, dtype=np.float32).reshape(1, 2, 2, 3)
        tokens = tokenize_features(T.Tensor(fmap))
        assert tokens.provenance == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert np.array_equal(tokens.tokens.data[0, 1], fmap[0, 0, 1])
        assert np.array_equal(tokens.tokens.data[0, 2], fmap[0, 1, 0])

    def test_roundtrip_bit_exact(self):
        fmap = np.random.default_rng(4).normal(size=(2, 3, 5, 7)).astype(np.float32)
        tokens = tokenize_features(T.Tensor(fmap))
        back = untokenize(tokens.tokens, tokens.grid)
        assert np.array_equal(back.data, fmap)

    def test_grid_16_makes_256_tokens(self):
        fmap = np.zeros((1, 16, 16, 4), dtype=np.float32)
        tokens = tokenize_features(T.Tensor(fmap))
        assert tokens.n_tokens == 256


class TestPositional:
    def test_zero_table_is_identity(self):
        store = ParameterStore("float64")
        pos = PositionalEmbedding(store, np.random.default_rng(0), "pos", 4, 8, grid=(2, 2))
        pos.table.data[:] = 0.0
        tokens = tokenize_features(T.Tensor(np.random.default_rng(1).normal(size=(1, 2, 2, 8))))
        out = pos(tokens)
        assert np.array_equal(out.tokens.data, tokens.tokens.data)

    def test_identical_tokens_become_distinguishable(self):
        store = ParameterStore("float64")
        pos = PositionalEmbedding(store, np.random.default_rng(0), "pos", 4, 8, grid=(2, 2))
        tokens = tokenize_features(T.Tensor(np.ones((1, 2, 2, 8))))
        out = pos(tokens).tokens.data[0]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(out[i], out[j])

    def test_gradient_reaches_table(self):
        store = ParameterStore("float64")
        pos = PositionalEmbedding(store, np.random.default_rng(0), "pos", 4, 8, grid=(2, 2))
        tokens = tokenize_features(
            T.Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 8)), requires_grad=False))
        with T.Tape() as tape:
            out = pos(tokens)
            T.backward(T.sum_(T.mul(out.tokens, out.tokens)), tape=tape)
        assert pos.table.grad is not None
        assert np.abs(pos.table.grad).max() > 0

    def test_shape_mismatch_rejected(self):
        store = ParameterStore("float64")
        pos = PositionalEmbedding(store, np.random.default_rng(0), "pos", 4, 8, grid=(2, 2))
        tokens = tokenize_features(T.Tensor(np.zeros((1, 3, 3, 8))))
        with pytest.raises(ConfigError):
            pos(tokens)

    def test_sine_table_rows_distinct(self):
        table = sine_position_table(8, 8, 64)
        assert table.shape == (64, 64)
        dists = ((table[None, :, :] - table[:, None, :]) ** 2).sum(-1)
        np.fill_diagonal(dists, 1.0)
        assert dists.min() > 0
