import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textloc.autodiff import ContractError, ParameterError
from textloc.encoders import (
    BOS,
    EOS,
    DualEncoder,
    EncoderConfig,
    TokenSequence,
    Vocabulary,
    expand_positional_embedding,
    tokenize,
    tokenize_words,
)


@pytest.fixture(scope="module")
def small_config():
    return EncoderConfig(vocab_size=30, d_model=16, n_heads=2, n_layers=1,
                         base_context=8, context=12, image_size=16,
                         patch_size=8, embed_dim=8)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(["burger mania on the left", "a quiet road ahead"])


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ParameterError):
            EncoderConfig(vocab_size=10, d_model=10, n_heads=3)

    def test_patch_divisibility(self):
        with pytest.raises(ParameterError):
            EncoderConfig(vocab_size=10, image_size=60, patch_size=8)

    def test_context_ordering(self):
        with pytest.raises(ParameterError):
            EncoderConfig(vocab_size=10, base_context=77, context=50)


class TestExpandPositionalEmbedding:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(7, 4))
        np.testing.assert_array_equal(expand_positional_embedding(P, 7), P)

    def test_hand_interpolation(self):
        P = np.array([[0.0], [1.0]])
        out = expand_positional_embedding(P, 3)
        np.testing.assert_allclose(out, [[0.0], [0.5], [1.0]])

    def test_default_sizes(self):
        P = np.random.default_rng(1).normal(size=(77, 4))
        out = expand_positional_embedding(P, 300)
        assert out.shape == (300, 4)
        np.testing.assert_array_equal(out[0], P[0])
        np.testing.assert_array_equal(out[-1], P[-1])

    def test_shrinking_rejected(self):
        with pytest.raises(ParameterError):
            expand_positional_embedding(np.zeros((5, 2)), 3)

    def test_tiny_base_rejected(self):
        with pytest.raises(ParameterError):
            expand_positional_embedding(np.zeros((1, 2)), 3)

    def test_integral_positions_bit_near(self):
        rng = np.random.default_rng(2)
        P = rng.normal(size=(5, 3))
        out = expand_positional_embedding(P, 9)  # N = 2*N0 - 1
        np.testing.assert_allclose(out[::2], P, atol=1e-12)

    @given(st.integers(2, 12), st.integers(0, 20), st.integers(0, 10**6))
    @settings(max_examples=60, deadline=None)
    def test_segment_containment(self, n0, extra, seed):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(n0, 3))
        N = n0 + extra
        out = expand_positional_embedding(P, N)
        x = np.arange(N) * (n0 - 1) / (N - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n0 - 1)
        low = np.minimum(P[lo], P[hi])
        high = np.maximum(P[lo], P[hi])
        assert np.all(out >= low - 1e-12)
        assert np.all(out <= high + 1e-12)


class TestTokenize:
    def test_empty(self, vocab, small_config):
        seq = tokenize("", vocab, small_config)
        assert seq.ids == [BOS, EOS]
        assert seq.length == 0

    def test_known_phrase(self, vocab, small_config):
        seq = tokenize("Burger Mania", vocab, small_config)
        assert seq.ids[0] == BOS and seq.ids[-1] == EOS
        assert seq.ids[1] == vocab.index["burger"]
        assert seq.ids[2] == vocab.index["mania"]

    def test_truncation_bound(self, vocab, small_config):
        seq = tokenize(" ".join(["word"] * 1000), vocab, small_config)
        assert len(seq.ids) == small_config.context

    def test_deterministic(self, vocab, small_config):
        a = tokenize("A quiet ROAD", vocab, small_config)
        b = tokenize("A quiet ROAD", vocab, small_config)
        assert a.ids == b.ids

    def test_exactly_one_end_marker(self):
        with pytest.raises(ContractError):
            TokenSequence(ids=[BOS, 5], length=1)

    def test_word_splitting(self):
        assert tokenize_words("Left, then RIGHT!") == ["left", "then", "right"]


class TestVocabulary:
    def test_roundtrip(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens


@pytest.fixture(scope="module")
def dual(small_config):
    return DualEncoder(small_config, seed=5)


class TestEncodeText:
    def test_unit_norm(self, dual, vocab, small_config):
        seq = tokenize("quiet road", vocab, small_config)
        emb, _ = dual.encode_text([seq])
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=-1), 1.0, atol=1e-9)

    def test_determinism(self, dual, vocab, small_config):
        seq = tokenize("burger mania", vocab, small_config)
        a, _ = dual.encode_text([seq])
        b, _ = dual.encode_text([seq])
        np.testing.assert_array_equal(a.data, b.data)

    def test_padding_invariance(self, dual, vocab, small_config):
        # same text batched with a longer one (forcing padding) must match
        # the unpadded single forward
        short = tokenize("quiet road", vocab, small_config)
        long = tokenize("burger mania on the left ahead", vocab, small_config)
        alone, _ = dual.encode_text([short])
        padded, _ = dual.encode_text([short, long])
        np.testing.assert_allclose(alone.data[0], padded.data[0], atol=1e-12)

    def test_context_overflow(self, dual):
        ids = [BOS] + [4] * 20 + [EOS]
        with pytest.raises(ContractError):
            dual.encode_text([TokenSequence(ids=ids, length=20)])


class TestEncodeImage:
    def test_zero_tile(self, dual, small_config):
        emb, _ = dual.encode_image(np.zeros((16, 16, 3)))
        assert np.all(np.isfinite(emb.data))
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=-1), 1.0, atol=1e-9)

    def test_determinism(self, dual):
        tile = np.random.default_rng(0).random((16, 16, 3))
        a, _ = dual.encode_image(tile)
        b, _ = dual.encode_image(tile)
        np.testing.assert_array_equal(a.data, b.data)

    def test_patch_count(self):
        cfg = EncoderConfig(vocab_size=10, d_model=16, n_heads=2, n_layers=1,
                            base_context=4, context=4, image_size=64,
                            patch_size=8, embed_dim=8)
        model = DualEncoder(cfg, seed=0)
        _, attns = model.encode_image(np.zeros((64, 64, 3)),
                                      retain_attention=True)
        assert attns[0].data.shape[-1] == 64 + 1

    def test_wrong_size(self, dual):
        from textloc.autodiff import ShapeError

        with pytest.raises(ShapeError):
            dual.encode_image(np.zeros((8, 8, 3)))

    def test_cosine_in_range(self, dual, vocab, small_config):
        rng = np.random.default_rng(1)
        t, _ = dual.encode_text([tokenize("road", vocab, small_config)])
        v, _ = dual.encode_image(rng.random((16, 16, 3)))
        sim = float(t.data[0] @ v.data[0])
        assert -1.0 <= sim <= 1.0


class TestExpandOnModel:
    def test_expand_then_encode_longer(self, small_config, vocab):
        model = DualEncoder(small_config, seed=2)
        model.expand_text_context()
        assert model.text.context_length == small_config.context
        seq = tokenize("burger mania on the left ahead now", vocab, small_config)
        emb, _ = model.encode_text([seq])
        np.testing.assert_allclose(np.linalg.norm(emb.data), 1.0, atol=1e-9)
        assert model.text.params["pos"].requires_grad


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, small_config, vocab):
        model = DualEncoder(small_config, seed=3)
        model.expand_text_context()
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = DualEncoder.load(path)
        seq = tokenize("quiet road", vocab, small_config)
        a, _ = model.encode_text([seq])
        b, _ = loaded.encode_text([seq])
        # float32 storage rounds the parameters
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)
        assert loaded.config == small_config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"nope")
        with pytest.raises(ContractError):
            DualEncoder.load(path)
