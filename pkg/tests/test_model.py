"""Whole-model behavior: shapes, determinism, permutation properties."""

import numpy as np
import pytest

import refbox.tensor as T
from refbox.checks import TINY_CONFIG, build_tiny_model, tiny_model_inputs
from refbox.errors import ConfigError
from refbox.model import GroundingModel, ModelConfig


@pytest.fixture(scope="module")
def tiny():
    model = build_tiny_model(seed=3)
    images, ids, lengths, target = tiny_model_inputs(seed=3)
    return model, T.as_tensor(images, dtype="float64"), ids, lengths


class TestForward:
    def test_output_shapes(self, tiny):
        model, images, ids, lengths = tiny
        out = model.forward(images, ids, lengths)
        assert out.box.shape == (1, 4)
        assert out.decoded.shape == (1, TINY_CONFIG["n_text_tokens"], TINY_CONFIG["dim"])
        assert out.visual_tokens.shape == (1, 4, TINY_CONFIG["dim"])

    def test_deterministic(self, tiny):
        model, images, ids, lengths = tiny
        a = model.forward(images, ids, lengths).box.numpy()
        b = model.forward(images, ids, lengths).box.numpy()
        assert np.array_equal(a, b)

    def test_box_inside_unit_square(self, tiny):
        model, images, ids, lengths = tiny
        box = model.predict(images.numpy(), ids, lengths)
        assert np.all(box > 0) and np.all(box < 1)

    def test_every_parameter_reachable(self, tiny):
        model, images, ids, lengths = tiny
        from refbox.heads import total_loss
        model.store.zero_grad()
        with T.Tape() as tape:
            out = model.forward(images, ids, lengths)
            T.backward(total_loss(np.array([[0.5, 0.5, 0.2, 0.2]]), out.box), tape=tape)
        missing = [p.name for p in model.store if p.grad is None]
        assert missing == []


class TestPermutation:
    def test_visual_token_permutation(self, tiny):
        """Permuting position-tagged visual tokens permutes the encoder's
        visual output identically and leaves decoder output and box
        unchanged."""
        model, images, ids, lengths = tiny
        text = model.encode_text(ids, lengths)
        visual = model.encode_image(images)
        box, x_v, _, decoded = model.ground(visual, text.tokens)

        rng = np.random.default_rng(0)
        perm = rng.permutation(visual.shape[1])
        shuffled = T.as_tensor(visual.numpy()[:, perm], dtype=visual.dtype)
        box_p, x_v_p, _, decoded_p = model.ground(shuffled, text.tokens)

        assert np.allclose(x_v_p.numpy(), x_v.numpy()[:, perm], atol=1e-5)
        assert np.allclose(decoded_p.numpy(), decoded.numpy(), atol=1e-5)
        assert np.allclose(box_p.numpy(), box.numpy(), atol=1e-5)

    def test_positional_toggle(self):
        config = ModelConfig(**{**TINY_CONFIG, "use_positional": False})
        model = GroundingModel(config, vocab_size=8, seed=0, dtype="float64")
        assert model.positional is None
        assert not any("positional" in n for n in model.store.names())
        images, ids, lengths, _ = tiny_model_inputs(seed=1)
        assert model.predict(images, ids, lengths).shape == (1, 4)


class TestTextIdentity:
    def test_zero_text_guidance_identity_end_to_end(self, tiny):
        """With zero textual tokens the guidance is exactly additive-zero,
        so the guided visual branch equals the plain one bit for bit."""
        model, images, ids, lengths = tiny
        visual = model.encode_image(images)
        zeros = T.as_tensor(np.zeros((1, 2, TINY_CONFIG["dim"])), dtype="float64")
        layer = model.encoder_layers[0]
        guided = layer.visual_branch(visual, zeros)
        layer_fusion = layer.fusion
        try:
            layer.fusion = "none"
            plain = layer.visual_branch(visual, zeros)
        finally:
            layer.fusion = layer_fusion
        assert np.array_equal(guided.numpy(), plain.numpy())


class TestTrace:
    def test_all_attention_rows_stochastic(self, tiny):
        model, images, ids, lengths = tiny
        trace = {}
        model.forward(images, ids, lengths, trace=trace)
        assert trace, "trace should collect attention sites"
        names = set(trace)
        assert any("enc_attn" in n for n in names)
        assert any("visual.attn" in n for n in names)
        for key, weights in trace.items():
            sums = weights.sum(axis=-1)
            assert np.allclose(sums, 1.0, atol=1e-6), key


class TestConfigs:
    def test_invalid_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(dim=8, n_heads=3).validate()

    def test_ablation_variants_build_and_run(self):
        images, ids, lengths, _ = tiny_model_inputs(seed=2)
        for overrides in (
            {"encoder_visual": False, "encoder_textual": False, "fusion": "none"},
            {"encoder_textual": False, "fusion": "none"},
            {"encoder_textual": False, "fusion": "text_guided"},
            {"encoder_textual": True, "fusion": "none"},
            {"fusion": "cross_modal"},
        ):
            config = ModelConfig(**{**TINY_CONFIG, **overrides})
            model = GroundingModel(config, vocab_size=8, seed=0, dtype="float64")
            box = model.predict(images, ids, lengths)
            assert box.shape == (1, 4)

    def test_decoder_only_has_no_encoder_parameters(self):
        config = ModelConfig(**{**TINY_CONFIG, "encoder_visual": False,
                                "encoder_textual": False, "fusion": "none"})
        model = GroundingModel(config, vocab_size=8, seed=0)
        assert not any(name.startswith("encoder.") for name in model.store.names())

    def test_config_dict_roundtrip(self):
        config = ModelConfig(**TINY_CONFIG)
        assert ModelConfig.from_dict(config.to_dict()) == config
