"""Referring-expression encoding: vocabulary, bidirectional recurrent
encoder, and the soft parser that distills a sentence into a fixed number
of phrase tokens.

Each phrase token k owns a learned query vector; attention of that query
over the recurrent states yields weights a[k, t] (masked to the true
sentence length), and the token is the weighted sum of word embeddings.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .layers import ParameterStore, glorot_uniform

PAD_ID = 0
UNK_ID = 1
MAX_WORDS = 20

_WORD_RE = re.compile(r"[a-z0-9]+")
# Large negative logit: exp underflows to exactly 0, so padded positions
# carry zero attention mass.
_MASK_LOGIT = -1e9


class Vocabulary:
    """Word-to-id map with reserved PAD=0 and UNK=1.

    Construction is deterministic: words sorted by descending frequency,
    ties broken alphabetically.
    """

    def __init__(self, words):
        self.words = list(words)
        self._ids = {w: i + 2 for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")

    @classmethod
    def build(cls, texts):
        counts = Counter()
        for text in texts:
            counts.update(_WORD_RE.findall(text.lower()))
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ordered)

    @property
    def size(self):
        return len(self.words) + 2

    def id_of(self, word):
        return self._ids.get(word, UNK_ID)

    def __contains__(self, word):
        return word in self._ids

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for w in self.words:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.strip() for line in fh if line.strip()])


@dataclass
class Expression:
    """A tokenized sentence: padded id sequence plus its true length."""

    text: str
    ids: np.ndarray
    length: int


def tokenize(text, vocab, max_words=MAX_WORDS):
    """Lowercase, split on non-alphanumerics, map to ids, truncate, pad."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise InputError(f"expression {text!r} contains no words")
    words = words[:max_words]
    ids = np.full(max_words, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = vocab.id_of(w)
    return Expression(text=text, ids=ids, length=len(words))


def batch_expressions(expressions):
    ids = np.stack([e.ids for e in expressions])
    lengths = np.array([e.length for e in expressions], dtype=np.int64)
    return ids, lengths


@dataclass
class TextualTokens:
    """Soft-parsed phrase embeddings and their word-attention map.

    tokens   : (B, n_tokens, d) Tensor
    attention: (B, n_tokens, T) Tensor; each row is a distribution over
               the unpadded word positions.
    """

    tokens: T.Tensor
    attention: T.Tensor
    lengths: np.ndarray = field(default=None)


class _LstmDirection:
    def __init__(self, store, rng, name, dim_in, hidden):
        self.hidden = hidden
        self.wx = store.create(f"{name}.wx", glorot_uniform(rng, (dim_in, 4 * hidden), dim_in, hidden))
        self.wh = store.create(f"{name}.wh", glorot_uniform(rng, (hidden, 4 * hidden), hidden, hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget-gate bias
        self.b = store.create(f"{name}.b", bias)

    def run(self, u, masks, reverse=False):
        """Scan the sequence, carrying state through masked (padded) steps.

        u: (B, T, d) embeddings; masks: list of (B, 1) float arrays.
        Returns a list of T hidden-state Tensors of shape (B, hidden).
        """
        b, t_max, _ = u.shape
        hsz = self.hidden
        xp = T.add(T.matmul(u, self.wx), self.b)  # (B, T, 4H)
        dtype = u.dtype
        h = T.as_tensor(np.zeros((b, hsz)), dtype=dtype)
        c = T.as_tensor(np.zeros((b, hsz)), dtype=dtype)
        order = range(t_max - 1, -1, -1) if reverse else range(t_max)
        states = [None] * t_max
        for t in order:
            gates = T.add(T.reshape(T.narrow(xp, 1, t, 1), (b, 4 * hsz)),
                          T.matmul(h, self.wh))
            i = T.sigmoid(T.narrow(gates, -1, 0, hsz))
            f = T.sigmoid(T.narrow(gates, -1, hsz, hsz))
            g = T.tanh(T.narrow(gates, -1, 2 * hsz, hsz))
            o = T.sigmoid(T.narrow(gates, -1, 3 * hsz, hsz))
            c_new = T.add(T.mul(f, c), T.mul(i, g))
            h_new = T.mul(o, T.tanh(c_new))
            m = masks[t]
            c = T.add(T.mul(c_new, m), T.mul(c, 1.0 - m))
            h = T.add(T.mul(h_new, m), T.mul(h, 1.0 - m))
            states[t] = h
        return states


class SoftParser:
    """Embedding layer + BiLSTM + per-token attention over words."""

    def __init__(self, store, rng, name, vocab_size, dim, n_tokens):
        if dim % 2 != 0:
            raise ConfigError(f"text width {dim} must be even to split across directions")
        self.dim = dim
        self.n_tokens = n_tokens
        self.vocab_size = vocab_size
        self.embedding = store.create(f"{name}.embedding",
                                      rng.uniform(-0.1, 0.1, size=(vocab_size, dim)))
        hidden = dim // 2
        self.fwd = _LstmDirection(store, rng, f"{name}.fwd", dim, hidden)
        self.bwd = _LstmDirection(store, rng, f"{name}.bwd", dim, hidden)
        self.queries = store.create(f"{name}.queries",
                                    glorot_uniform(rng, (n_tokens, dim), dim, dim))

    def _masks(self, lengths, t_max, dtype):
        steps = np.arange(t_max)
        m = (steps[None, :] < np.asarray(lengths)[:, None]).astype(dtype)
        return [T.as_tensor(m[:, t:t + 1], dtype=dtype) for t in range(t_max)]

    def encode_words(self, ids, lengths):
        """Embed ids and run both recurrent directions.

        ids: (B, T) int array; lengths: (B,) true lengths.
        Returns (U, H), both (B, T, d): U the word embeddings, H the
        concatenated forward/backward states.  Padded steps carry the
        last real state but are masked out by every consumer.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
            lengths = np.asarray([lengths]).reshape(1)
        b, t_max = ids.shape
        dtype = self.embedding.dtype
        u = T.reshape(T.embedding_lookup(self.embedding, ids.reshape(-1)),
                      (b, t_max, self.dim))
        masks = self._masks(lengths, t_max, dtype)
        f_states = self.fwd.run(u, masks, reverse=False)
        b_states = self.bwd.run(u, masks, reverse=True)
        rows = [T.reshape(T.concat([f_states[t], b_states[t]], axis=-1), (b, 1, self.dim))
                for t in range(t_max)]
        h = T.concat(rows, axis=1)
        return u, h

    def soft_parse(self, u, h, lengths):
        """Attend each phrase query over the recurrent states.

        Weights are masked to the true length; each token is the weighted
        sum of word embeddings under its attention row.
        """
        b, t_max, _ = h.shape
        logits = T.transpose(T.matmul(h, T.transpose(self.queries)), (0, 2, 1))
        steps = np.arange(t_max)
        pad = (steps[None, :] >= np.asarray(lengths)[:, None])
        mask = np.where(pad, _MASK_LOGIT, 0.0).astype(logits.data.dtype)
        logits = T.add(logits, T.as_tensor(mask[:, None, :], dtype=logits.dtype))
        attn = T.softmax(logits, axis=-1)  # (B, n_tokens, T)
        tokens = T.matmul(attn, u)
        return TextualTokens(tokens=tokens, attention=attn, lengths=np.asarray(lengths))

    def encode(self, ids, lengths):
        u, h = self.encode_words(ids, lengths)
        return self.soft_parse(u, h, lengths)


def encode_expression(text, vocab, parser):
    """Tokenize one sentence and soft-parse it into phrase tokens."""
    expr = tokenize(text, vocab)
    out = parser.encode(expr.ids[None, :], np.array([expr.length]))
    return TextualTokens(tokens=T.reshape(out.tokens, (parser.n_tokens, parser.dim)),
                         attention=T.reshape(out.attention, (parser.n_tokens, expr.ids.shape[0])),
                         lengths=out.lengths)
