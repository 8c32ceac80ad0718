"""Two-stream grounding encoder and query-driven decoder.

Each encoder layer advances both streams: the textual branch first
(plain pre-norm self-attention + feed-forward), then the visual branch,
whose attention queries are additively augmented by a softmax-weighted
sum of the freshly advanced textual tokens (text-guided self-attention).
An ablation flag swaps that mechanism for standard cross-modal attention
(visual queries, textual keys/values).

The decoder turns the final textual tokens into grounding queries and
alternates query self-attention with attention over the encoded visual
tokens; all three decoder sublayers are post-norm (the residual is added
before the layer norm).
"""

from __future__ import annotations

import math

import numpy as np
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import FeedForward, LayerNorm, Linear

FUSION_TEXT_GUIDED = "text_guided"
FUSION_CROSS_MODAL = "cross_modal"
FUSION_NONE = "none"  # plain visual self-attention, no language input
FUSION_MODES = (FUSION_TEXT_GUIDED, FUSION_CROSS_MODAL, FUSION_NONE)

SCALE_PER_HEAD = "per_head"
SCALE_MODEL = "model"


@dataclass
class AttentionConfig:
    """Width/head layout shared by every attention site."""

    dim: int
    n_heads: int
    scale: str = SCALE_PER_HEAD

    def validate(self):
        if self.dim <= 0 or self.n_heads <= 0:
            raise ConfigError(f"dim {self.dim} and n_heads {self.n_heads} must be positive")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"head count {self.n_heads} does not divide width {self.dim}")
        if self.scale not in (SCALE_PER_HEAD, SCALE_MODEL):
            raise ConfigError(f"unknown attention scale {self.scale!r}")
        return self

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    @property
    def scale_dim(self):
        return self.head_dim if self.scale == SCALE_PER_HEAD else self.dim


def _promote(x):
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _demote(x, single):
    return T.reshape(x, x.shape[1:]) if single else x


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention_core(q, k, v, cfg, trace=None, trace_key=None):
    """Scaled dot-product attention over heads; no projections.

    q: (B, Tq, d); k, v: (B, Tk, d).  Returns (B, Tq, d).
    """
    qh = _split_heads(q, cfg.n_heads)
    kh = _split_heads(k, cfg.n_heads)
    vh = _split_heads(v, cfg.n_heads)
    logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))),
                     1.0 / math.sqrt(cfg.scale_dim))
    weights = T.softmax(logits, axis=-1)
    if trace is not None and trace_key is not None:
        trace[trace_key] = weights.numpy()
    return _merge_heads(T.matmul(weights, vh))


class AttentionParams:
    """Query/key/value/output projections for one attention site.

    Values and the output start as identity maps (still trainable), so
    attended token mixtures reach the residual stream unrotated at init;
    query/key projections stay random.  This keeps linearly-decodable
    token content (e.g. the positional code) readable by downstream
    layers from the first step, which matters when training from
    scratch on a small budget."""

    def __init__(self, store, rng, name, dim):
        self.q = Linear(store, rng, f"{name}.q", dim, dim)
        self.k = Linear(store, rng, f"{name}.k", dim, dim)
        self.v = Linear(store, rng, f"{name}.v", dim, dim)
        self.v.w.data[:] = np.eye(dim)
        self.out = Linear(store, rng, f"{name}.out", dim, dim)
        self.out.w.data[:] = np.eye(dim)


def multi_head_attention(q_in, k_in, v_in, params, cfg, trace=None, trace_key=None):
    """Project inputs, attend, and apply the output projection.

    Accepts (T, d) or (B, T, d) inputs; keys and values must share shape.
    """
    cfg.validate()
    q_in, single = _promote(q_in)
    k_in, _ = _promote(k_in)
    v_in, _ = _promote(v_in)
    for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
        if t.shape[-1] != cfg.dim:
            raise ConfigError(f"{name} width {t.shape[-1]} != model width {cfg.dim}")
    ctx = attention_core(params.q(q_in), params.k(k_in), params.v(v_in), cfg,
                         trace=trace, trace_key=trace_key)
    return _demote(params.out(ctx), single)


def text_guided_query(q_v, text_tokens, trace=None, trace_key=None):
    """Augment visual queries with a weighted sum of textual tokens.

    q_hat = q_v + softmax(q_v text^T / sqrt(d)) text, with the softmax
    taken row-wise over the textual tokens at full width (before any
    head split).  Zero textual tokens leave the queries bit-identical.
    """
    q_v, single = _promote(q_v)
    text_tokens, _ = _promote(text_tokens)
    d = q_v.shape[-1]
    if text_tokens.shape[-1] != d:
        raise ConfigError(f"textual width {text_tokens.shape[-1]} != visual width {d}")
    logits = T.scale(T.matmul(q_v, T.transpose(text_tokens, (0, 2, 1))),
                     1.0 / math.sqrt(d))
    weights = T.softmax(logits, axis=-1)  # (B, T_v, T_l)
    if trace is not None and trace_key is not None:
        trace[trace_key] = weights.numpy()
    return _demote(T.add(q_v, T.matmul(weights, text_tokens)), single)


class EncoderLayer:
    """One layer of the two-stream encoder (pre-norm residual sublayers)."""

    def __init__(self, store, rng, name, cfg, ffn_mult=4,
                 textual=True, visual=True, fusion=FUSION_TEXT_GUIDED):
        cfg.validate()
        if fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion variant {fusion!r}")
        self.cfg = cfg
        self.name = name
        self.textual = textual
        self.visual = visual
        self.fusion = fusion
        d = cfg.dim
        if textual:
            self.t_norm1 = LayerNorm(store, f"{name}.textual.norm1", d)
            self.t_attn = AttentionParams(store, rng, f"{name}.textual.attn", d)
            self.t_norm2 = LayerNorm(store, f"{name}.textual.norm2", d)
            self.t_ffn = FeedForward(store, rng, f"{name}.textual.ffn", d, ffn_mult * d)
        if visual:
            self.v_norm1 = LayerNorm(store, f"{name}.visual.norm1", d)
            self.v_attn = AttentionParams(store, rng, f"{name}.visual.attn", d)
            self.v_norm2 = LayerNorm(store, f"{name}.visual.norm2", d)
            self.v_ffn = FeedForward(store, rng, f"{name}.visual.ffn", d, ffn_mult * d)

    def textual_branch(self, x_l, trace=None):
        if not self.textual:
            return x_l
        x_l, single = _promote(x_l)
        normed = self.t_norm1(x_l)
        attended = multi_head_attention(normed, normed, normed, self.t_attn, self.cfg,
                                        trace=trace, trace_key=f"{self.name}.textual.attn")
        x = T.add(x_l, attended)
        x = T.add(x, self.t_ffn(self.t_norm2(x)))
        return _demote(x, single)

    def visual_branch(self, x_v, x_l_next, trace=None):
        """Advance the visual tokens under the configured fusion mode."""
        if not self.visual:
            return x_v
        x_v, single = _promote(x_v)
        x_l_next, _ = _promote(x_l_next)
        normed = self.v_norm1(x_v)
        q = self.v_attn.q(normed)
        if self.fusion == FUSION_CROSS_MODAL:
            # Standard cross-modal attention: visual queries, textual keys/values.
            k = self.v_attn.k(x_l_next)
            v = self.v_attn.v(x_l_next)
        else:
            if self.fusion == FUSION_TEXT_GUIDED:
                q = text_guided_query(q, x_l_next, trace=trace,
                                      trace_key=f"{self.name}.visual.guide")
            k = self.v_attn.k(normed)
            v = self.v_attn.v(normed)
        ctx = attention_core(q, k, v, self.cfg, trace=trace,
                             trace_key=f"{self.name}.visual.attn")
        x = T.add(x_v, self.v_attn.out(ctx))
        x = T.add(x, self.v_ffn(self.v_norm2(x)))
        return _demote(x, single)

    def __call__(self, x_v, x_l, trace=None):
        x_l_next = self.textual_branch(x_l, trace=trace)
        x_v_next = self.visual_branch(x_v, x_l_next, trace=trace)
        return x_v_next, x_l_next


class DecoderLayer:
    """Query self-attention with its norm applied to residual + attention
    output; pre-norm residual sublayers for encoder attention and the
    feed-forward."""

    def __init__(self, store, rng, name, cfg, ffn_mult=4):
        cfg.validate()
        self.cfg = cfg
        self.name = name
        d = cfg.dim
        self.self_attn = AttentionParams(store, rng, f"{name}.self_attn", d)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.enc_attn = AttentionParams(store, rng, f"{name}.enc_attn", d)
        self.norm3 = LayerNorm(store, f"{name}.norm3", d)
        self.ffn = FeedForward(store, rng, f"{name}.ffn", d, ffn_mult * d)

    def query_self_attention(self, g, trace=None):
        """Self-attention over the grounding queries; the layer norm is
        applied to the attention output, with the residual added inside."""
        g, single = _promote(g)
        attended = multi_head_attention(g, g, g, self.self_attn, self.cfg,
                                        trace=trace, trace_key=f"{self.name}.self_attn")
        return _demote(self.norm1(T.add(g, attended)), single)

    def encoder_attention(self, g, x_v, trace=None):
        g, single = _promote(g)
        x_v, _ = _promote(x_v)
        attended = multi_head_attention(self.norm2(g), x_v, x_v, self.enc_attn, self.cfg,
                                        trace=trace, trace_key=f"{self.name}.enc_attn")
        h = T.add(g, attended)
        out = T.add(h, self.ffn(self.norm3(h)))
        return _demote(out, single)

    def __call__(self, g, x_v, trace=None):
        g = self.query_self_attention(g, trace=trace)
        return self.encoder_attention(g, x_v, trace=trace)


def encoder_forward(x_v, x_l, layers, trace=None):
    """Run the encoder stack; the textual branch leads within each layer
    so the visual branch always consumes the advanced textual tokens."""
    for layer in layers:
        x_v, x_l = layer(x_v, x_l, trace=trace)
    return x_v, x_l


def decoder_forward(x_l_final, x_v_final, layers, trace=None):
    """Chain the grounding queries (initialized from the encoder's final
    textual tokens) through the decoder stack."""
    g = x_l_final
    for layer in layers:
        g = layer(g, x_v_final, trace=trace)
    return g
