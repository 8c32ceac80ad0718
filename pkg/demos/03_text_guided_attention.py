"""The two fusion mechanisms, side by side on tiny hand-set inputs.

Text-guided self-attention keeps queries, keys, and values all visual and
only nudges the queries with a weighted sum of textual tokens, so zero
text collapses exactly to plain self-attention.  Standard cross-modal
attention instead reads its keys/values from the text.

Run: python demos/03_text_guided_attention.py
"""

import numpy as np

import refbox.tensor as T
from refbox.layers import ParameterStore
from refbox.transformer import (AttentionConfig, EncoderLayer,
                                text_guided_query)

# The guidance formula on scalars: weights softmax(q x^T / sqrt(d)) x.
q = T.Tensor([[1.0]], dtype="float64")
text = T.Tensor([[1.0], [3.0]], dtype="float64")
print("guided query  :", text_guided_query(q, text).numpy(), "(1 + 0.1192*1 + 0.8808*3)")

# Zero textual tokens are an exact no-op on the queries.
rng = np.random.default_rng(0)
q = T.Tensor(rng.normal(size=(5, 8)), dtype="float64")
zeros = T.Tensor(np.zeros((4, 8)), dtype="float64")
print("zero-text identity:", np.array_equal(text_guided_query(q, zeros).numpy(), q.numpy()))

# A full encoder layer under each fusion mode.
store = ParameterStore("float64")
layer = EncoderLayer(store, rng, "demo", AttentionConfig(8, 2), fusion="text_guided")
x_v = T.Tensor(rng.normal(size=(1, 6, 8)), dtype="float64")
x_l = T.Tensor(rng.normal(size=(1, 3, 8)), dtype="float64")

guided = layer.visual_branch(x_v, x_l).numpy()
layer.fusion = "cross_modal"
crossed = layer.visual_branch(x_v, x_l).numpy()
layer.fusion = "none"
plain = layer.visual_branch(x_v, x_l).numpy()

print("max |guided - plain|      :", np.abs(guided - plain).max())
print("max |guided - cross_modal|:", np.abs(guided - crossed).max())
print("(same parameters; only the fusion mode differs)")
