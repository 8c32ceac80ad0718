"""Full grounding model: expression + image in, normalized box out."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .heads import PredictionHead
from .layers import LayerNorm, ParameterStore
from .text import SoftParser, batch_expressions, tokenize
from .transformer import (AttentionConfig, DecoderLayer, EncoderLayer,
                          FUSION_MODES, decoder_forward, encoder_forward)
from .vision import Backbone, PositionalEmbedding, tokenize_features


@dataclass
class ModelConfig:
    """Architecture knobs; every field is serialized into checkpoints."""

    dim: int = 64
    n_heads: int = 8
    n_layers: int = 2
    n_text_tokens: int = 4
    image_size: int = 128
    stride: int = 16
    max_words: int = 20
    fusion: str = "text_guided"
    encoder_visual: bool = True
    encoder_textual: bool = True
    use_positional: bool = True
    attn_scale: str = "per_head"
    head_hidden: int = 0  # 0 means "use dim"
    backbone_widths: tuple = ()  # empty means the derived default
    ffn_mult: int = 4

    def validate(self):
        if self.dim % 2 != 0:
            raise ConfigError(f"dim {self.dim} must be even (split across LSTM directions)")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"n_heads {self.n_heads} does not divide dim {self.dim}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion variant {self.fusion!r}")
        if self.stride <= 0 or (self.stride & (self.stride - 1)) != 0:
            raise ConfigError(f"stride {self.stride} must be a power of two")
        if self.image_size % self.stride != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by stride {self.stride}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if self.n_text_tokens < 1:
            raise ConfigError("need at least one textual token")
        return self

    @property
    def grid(self):
        side = self.image_size // self.stride
        return (side, side)

    @property
    def n_visual_tokens(self):
        r, c = self.grid
        return r * c

    @property
    def has_encoder(self):
        return self.encoder_visual or self.encoder_textual

    def to_dict(self):
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone_widths"] = tuple(d.get("backbone_widths") or ())
        return cls(**d).validate()


@dataclass
class ModelOutput:
    """Forward-pass results; intermediate streams kept for inspection."""

    box: T.Tensor                  # (B, 4) in (0, 1)
    text_tokens: object            # TextualTokens (soft-parser output)
    visual_tokens: T.Tensor        # (B, T_v, d) after positional embedding
    visual_final: T.Tensor         # encoder output, visual stream
    text_final: T.Tensor           # encoder output, textual stream
    decoded: T.Tensor              # (B, T_l, d) decoder output


class GroundingModel:
    """Soft parser + conv backbone + grounding encoder/decoder + box head."""

    def __init__(self, config, vocab_size, seed=0, dtype="float32"):
        self.config = config.validate()
        self.vocab_size = vocab_size
        self.dtype = dtype
        self.store = ParameterStore(dtype)
        # Fixed spawn layout keeps per-component streams stable across
        # ablation variants that drop components.
        children = np.random.SeedSequence(seed).spawn(6)
        rng = [np.random.default_rng(c) for c in children]
        c = self.config
        self.parser = SoftParser(self.store, rng[0], "text",
                                 vocab_size, c.dim, c.n_text_tokens)
        self.backbone = Backbone(self.store, rng[1], "backbone", c.stride, c.dim,
                                 widths=c.backbone_widths or None)
        self.positional = (PositionalEmbedding(self.store, rng[2], "positional",
                                               c.n_visual_tokens, c.dim)
                           if c.use_positional else None)
        self.attn_cfg = AttentionConfig(c.dim, c.n_heads, c.attn_scale).validate()
        self.encoder_layers = []
        if c.has_encoder:
            self.encoder_layers = [
                EncoderLayer(self.store, rng[3], f"encoder.layer{i}", self.attn_cfg,
                             ffn_mult=c.ffn_mult, textual=c.encoder_textual,
                             visual=c.encoder_visual, fusion=c.fusion)
                for i in range(c.n_layers)
            ]
        self.decoder_layers = [
            DecoderLayer(self.store, rng[4], f"decoder.layer{i}", self.attn_cfg,
                         ffn_mult=c.ffn_mult)
            for i in range(c.n_layers)
        ]
        # Closing norm for the pre-norm residual stack, so the head sees
        # unit-scale features.
        self.decoder_norm = LayerNorm(self.store, "decoder.norm", c.dim)
        self.head = PredictionHead(self.store, rng[5], "head",
                                   c.n_text_tokens, c.dim,
                                   hidden=c.head_hidden or c.dim)

    # -- forward stages (split so tests can intervene between them) --------

    def encode_image(self, images):
        """Images (B, 3, H, W) -> visual tokens (B, T_v, d), position-aware."""
        fmap = self.backbone(images)
        visual = tokenize_features(fmap)
        if self.positional is not None:
            visual = self.positional(visual)
        return visual.tokens

    def encode_text(self, ids, lengths):
        return self.parser.encode(ids, lengths)

    def ground(self, visual_tokens, text_tokens, trace=None):
        """Encoder/decoder over prepared token streams; returns box + streams."""
        x_v, x_l = encoder_forward(visual_tokens, text_tokens,
                                   self.encoder_layers, trace=trace)
        decoded = self.decoder_norm(
            decoder_forward(x_l, x_v, self.decoder_layers, trace=trace))
        box = self.head(decoded)
        return box, x_v, x_l, decoded

    def forward(self, images, ids, lengths, trace=None):
        text = self.encode_text(ids, lengths)
        visual = self.encode_image(images)
        box, x_v, x_l, decoded = self.ground(visual, text.tokens, trace=trace)
        return ModelOutput(box=box, text_tokens=text, visual_tokens=visual,
                           visual_final=x_v, text_final=x_l, decoded=decoded)

    def predict(self, images, ids, lengths):
        """Boxes as a plain array; no tape is recorded."""
        return self.forward(images, ids, lengths).box.numpy()

    def predict_expressions(self, images, texts, vocab):
        exprs = [tokenize(t, vocab, self.config.max_words) for t in texts]
        ids, lengths = batch_expressions(exprs)
        return self.predict(images, ids, lengths)
