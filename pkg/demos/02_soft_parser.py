"""How a sentence becomes a fixed set of phrase tokens.

Each phrase token owns a query vector; attention of that query over the
BiLSTM states yields a distribution over words, and the token is the
attention-weighted sum of word embeddings.

Run: python demos/02_soft_parser.py
"""

import numpy as np

from refbox.layers import ParameterStore
from refbox.text import SoftParser, Vocabulary, batch_expressions, tokenize

corpus = [
    "red circle",
    "small blue square",
    "green triangle left of the purple circle",
]
vocab = Vocabulary.build(corpus)
print(f"vocabulary ({vocab.size} ids): PAD=0 UNK=1 +", vocab.words)

store = ParameterStore("float32")
parser = SoftParser(store, np.random.default_rng(0), "text",
                    vocab.size, dim=16, n_tokens=4)

exprs = [tokenize(t, vocab) for t in corpus]
ids, lengths = batch_expressions(exprs)
out = parser.encode(ids, lengths)
print("phrase tokens :", out.tokens.shape, "(batch, tokens, width)")

# Attention rows are distributions over the real words only; padding
# carries exactly zero mass.
for b, text in enumerate(corpus):
    words = text.split()
    print(f"\n{text!r}")
    attn = out.attention.numpy()[b, :, :lengths[b]]
    for k, row in enumerate(attn):
        top = np.argsort(row)[::-1][:2]
        peek = ", ".join(f"{words[i]}:{row[i]:.2f}" for i in top)
        print(f"  token {k}: mass on [{peek}]  (row sums to {row.sum():.6f})")
