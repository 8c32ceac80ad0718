"""Vocabulary, tokenization, the recurrent encoder, and the soft parser."""

import numpy as np
import pytest

import refbox.tensor as T
from refbox.errors import InputError
from refbox.layers import ParameterStore
from refbox.text import (MAX_WORDS, PAD_ID, UNK_ID, SoftParser, TextualTokens,
                         Vocabulary, batch_expressions, encode_expression,
                         tokenize)


def make_parser(vocab_size=10, dim=8, n_tokens=2, seed=0, dtype="float64"):
    store = ParameterStore(dtype)
    parser = SoftParser(store, np.random.default_rng(seed), "text",
                        vocab_size, dim, n_tokens)
    return parser, store


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.build(["red circle", "blue square"])
        assert PAD_ID == 0 and UNK_ID == 1
        assert v.id_of("red") >= 2

    def test_frequency_then_alphabetical(self):
        v = Vocabulary.build(["red red circle", "blue circle"])
        # red and circle appear twice (tie -> alphabetical), blue once
        assert v.words == ["circle", "red", "blue"]

    def test_order_independent_construction(self):
        texts = ["red circle", "blue square", "large green triangle"]
        a = Vocabulary.build(texts)
        b = Vocabulary.build(list(reversed(texts)))
        assert a.words == b.words

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocabulary.build(["red circle left of the blue square"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.words == v.words
        # id = line index + 2
        lines = path.read_text().splitlines()
        for i, w in enumerate(lines):
            assert loaded.id_of(w) == i + 2


class TestTokenize:
    def test_known_words(self):
        v = Vocabulary.build(["the red ball"])
        expr = tokenize("the red ball", v)
        assert expr.length == 3
        assert all(i != UNK_ID for i in expr.ids[:3])
        assert all(i == PAD_ID for i in expr.ids[3:])

    def test_unknown_word_maps_to_unk(self):
        v = Vocabulary.build(["cube sphere"])
        expr = tokenize("Zyzzyva cube", v)
        assert expr.ids[0] == UNK_ID
        assert expr.ids[1] == v.id_of("cube")

    def test_truncation_to_max_words(self):
        v = Vocabulary.build(["word"])
        text = " ".join(f"word" for _ in range(25))
        expr = tokenize(text, v)
        assert expr.length == MAX_WORDS
        assert len(expr.ids) == MAX_WORDS

    def test_empty_expression_rejected(self):
        v = Vocabulary.build(["word"])
        with pytest.raises(InputError):
            tokenize("...!!!", v)

    def test_punctuation_and_case(self):
        v = Vocabulary.build(["red circle"])
        expr = tokenize("RED, circle!", v)
        assert expr.ids[0] == v.id_of("red")
        assert expr.ids[1] == v.id_of("circle")


class TestEncodeWords:
    def test_output_shapes(self):
        parser, _ = make_parser(dim=8)
        ids = np.array([[2, 3, 4, 0, 0]])
        u, h = parser.encode_words(ids, np.array([3]))
        assert u.shape == (1, 5, 8)
        assert h.shape == (1, 5, 8)

    def test_single_word_states_ignore_padding(self):
        # With true length 1, both directions must condition on that word
        # alone: extra padding cannot change the state at position 0.
        parser, _ = make_parser()
        short = parser.encode_words(np.array([[5]]), np.array([1]))[1]
        padded = parser.encode_words(np.array([[5, 0, 0, 0, 0, 0]]), np.array([1]))[1]
        assert np.allclose(short.data[0, 0], padded.data[0, 0], atol=1e-12)

    def test_recurrence_gradients(self):
        parser, store = make_parser(dim=8)
        ids = np.array([[2, 3, 4]])
        lengths = np.array([3])
        rng = np.random.default_rng(1)
        weights = T.as_tensor(rng.normal(size=(1, 3, 8)), dtype="float64")

        def loss_fn():
            _, h = parser.encode_words(ids, lengths)
            return T.sum_(T.mul(h, weights))

        worst = fd_check_params(loss_fn, store, coords_per_param=6)
        assert worst < 1e-4


def fd_check_params(loss_fn, store, coords_per_param=None, step=1e-5):
    """Central differences over registered parameters."""
    store.zero_grad()
    with T.Tape() as tape:
        T.backward(loss_fn(), tape=tape)
    rng = np.random.default_rng(0)
    worst = 0.0
    for p in store:
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
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
            fd = (hi - lo) / (2 * step)
            worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-5))
    return worst


class TestSoftParse:
    def test_singleton_sentence_attends_fully(self):
        parser, _ = make_parser(n_tokens=3)
        out = parser.encode(np.array([[4]]), np.array([1]))
        assert np.allclose(out.attention.data, 1.0)
        u, _ = parser.encode_words(np.array([[4]]), np.array([1]))
        for k in range(3):
            assert np.allclose(out.tokens.data[0, k], u.data[0, 0], atol=1e-12)

    def test_attention_rows_are_distributions(self):
        parser, _ = make_parser(n_tokens=4)
        ids = np.array([[2, 3, 4, 0, 0], [5, 6, 0, 0, 0]])
        out = parser.encode(ids, np.array([3, 2]))
        sums = out.attention.data.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_padding_mass_is_exactly_zero(self):
        parser, _ = make_parser(n_tokens=2)
        ids = np.array([[2, 3, 0, 0, 0]])
        out = parser.encode(ids, np.array([2]))
        assert np.all(out.attention.data[0, :, 2:] == 0.0)

    def test_hand_worked_example(self):
        # One query (1,0); states ((5,0),(0,0)); embeddings ((1,1),(3,3)).
        # Logits (5, 0) give weights (0.9933, 0.0067) and a token near
        # (1.0134, 1.0134).
        parser, _ = make_parser(vocab_size=4, dim=2, n_tokens=1)
        parser.queries.data[:] = np.array([[1.0, 0.0]])
        u = T.Tensor(np.array([[[1.0, 1.0], [3.0, 3.0]]]), dtype="float64")
        h = T.Tensor(np.array([[[5.0, 0.0], [0.0, 0.0]]]), dtype="float64")
        out = parser.soft_parse(u, h, np.array([2]))
        assert np.allclose(out.attention.data[0, 0], [0.9933, 0.0067], atol=1e-4)
        assert np.allclose(out.tokens.data[0, 0], [1.0134, 1.0134], atol=1e-3)

    def test_tokens_in_convex_hull_scalar_case(self):
        parser, _ = make_parser(vocab_size=12, dim=2, n_tokens=2)
        rng = np.random.default_rng(3)
        for _ in range(20):
            t_len = int(rng.integers(1, 6))
            ids = np.zeros((1, 6), dtype=np.int64)
            ids[0, :t_len] = rng.integers(2, 12, size=t_len)
            out = parser.encode(ids, np.array([t_len]))
            u, _ = parser.encode_words(ids, np.array([t_len]))
            real = u.data[0, :t_len]
            for k in range(2):
                for d in range(2):
                    assert real[:, d].min() - 1e-9 <= out.tokens.data[0, k, d] <= real[:, d].max() + 1e-9


class TestEncodeExpression:
    def test_deterministic(self):
        parser, _ = make_parser(vocab_size=8, dim=8, n_tokens=4)
        vocab = Vocabulary.build(["red circle", "blue square"])
        a = encode_expression("red circle", vocab, parser)
        b = encode_expression("red circle", vocab, parser)
        assert np.array_equal(a.tokens.data, b.tokens.data)

    def test_default_token_count(self):
        parser, _ = make_parser(vocab_size=8, dim=8, n_tokens=4)
        vocab = Vocabulary.build(["red circle"])
        out = encode_expression("red circle", vocab, parser)
        assert out.tokens.shape == (4, 8)

    def test_every_parameter_gets_gradient(self):
        parser, store = make_parser(vocab_size=10, dim=8, n_tokens=2)
        ids = np.array([[2, 3, 4, 9], [5, 6, 0, 0]])
        lengths = np.array([4, 2])
        with T.Tape() as tape:
            out = parser.encode(ids, lengths)
            T.backward(T.sum_(T.mul(out.tokens, out.tokens)), tape=tape)
        for p in store:
            assert p.grad is not None, p.name
            assert np.abs(p.grad).max() > 0, p.name
