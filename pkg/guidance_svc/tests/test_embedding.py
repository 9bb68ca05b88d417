import numpy as np
import pytest

from guidance_svc.embedding import ConditionEmbedding, EncoderBank, ShapeMismatch, embed_conditions, fuse_tokens


def _images(rng, h=8, w=8):
    return rng.random((h, w, 3)), rng.random((h, w, 3))


class TestEncoderBank:
    def test_token_shapes(self):
        enc = EncoderBank(l_t=7, l_i=9, d=5, seed=0)
        rng = np.random.default_rng(0)
        assert enc.encode_text("hi there").shape == (7, 5)
        assert enc.encode_image(rng.random((10, 12, 3))).shape == (9, 5)
        assert enc.encode_depth(rng.random((10, 12))).shape == (9, 5)

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(1)
        img = rng.random((6, 6, 3))
        a = EncoderBank(l_t=4, l_i=4, d=6, seed=5).encode_image(img)
        b = EncoderBank(l_t=4, l_i=4, d=6, seed=5).encode_image(img)
        assert np.array_equal(a, b)

    def test_non_square_patch_count_rejected(self):
        with pytest.raises(ValueError):
            EncoderBank(l_t=4, l_i=5, d=6)

    def test_text_longer_than_window_truncated(self):
        enc = EncoderBank(l_t=3, l_i=1, d=4, seed=0)
        short = enc.encode_text("abc")
        long = enc.encode_text("abcdefgh")
        assert np.array_equal(short, long)

    def test_image_shape_validated(self):
        enc = EncoderBank(l_t=3, l_i=4, d=4, seed=0)
        with pytest.raises(ShapeMismatch):
            enc.encode_image(np.zeros((8, 8)))
        with pytest.raises(ShapeMismatch):
            enc.encode_depth(np.zeros((8, 8, 3)))


class TestFusion:
    def test_idempotent_on_equal_inputs(self):
        rng = np.random.default_rng(2)
        tokens = rng.random((6, 4))
        assert np.array_equal(fuse_tokens(tokens, tokens), tokens)

    def test_commutative(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((6, 4)), rng.random((6, 4))
        assert np.array_equal(fuse_tokens(a, b), fuse_tokens(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fuse_tokens(np.zeros((4, 4)), np.zeros((5, 4)))


class TestEmbedConditions:
    def test_concatenation_order_is_text_prev_next(self):
        enc = EncoderBank(l_t=3, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(4)
        prev, nxt = _images(rng)
        cond = embed_conditions(enc, "road", prev, nxt)
        assert np.array_equal(cond.concatenated[:3], cond.text_tokens)
        assert np.array_equal(cond.concatenated[3:7], cond.image_prev)
        assert np.array_equal(cond.concatenated[7:], cond.image_next)
        swapped = embed_conditions(enc, "road", nxt, prev)
        assert not np.array_equal(cond.concatenated, swapped.concatenated)

    def test_depths_swap_in_fused_tokens(self):
        enc = EncoderBank(l_t=2, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(5)
        prev, nxt = _images(rng)
        dp, dn = rng.random((8, 8)) * 4, rng.random((8, 8)) * 4
        cond = embed_conditions(enc, "road", prev, nxt, dp, dn)
        assert np.array_equal(cond.fused_prev, 0.5 * (cond.image_prev + cond.depth_prev))
        assert np.array_equal(cond.concatenated[2:6], cond.fused_prev)
        assert np.array_equal(cond.concatenated[6:], cond.fused_next)

    def test_reference_shape_mismatch(self):
        enc = EncoderBank(l_t=2, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(6)
        with pytest.raises(ShapeMismatch):
            embed_conditions(enc, "x", rng.random((8, 8, 3)), rng.random((6, 8, 3)))

    def test_one_sided_depth_rejected(self):
        enc = EncoderBank(l_t=2, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(7)
        prev, nxt = _images(rng)
        with pytest.raises(ShapeMismatch):
            embed_conditions(enc, "x", prev, nxt, depth_prev=rng.random((8, 8)))

    def test_dropout_requires_rng(self):
        enc = EncoderBank(l_t=2, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(8)
        prev, nxt = _images(rng)
        with pytest.raises(ValueError):
            embed_conditions(enc, "x", prev, nxt, dropout_p=0.5)

    def test_dropped_condition_is_all_zeros(self):
        enc = EncoderBank(l_t=2, l_i=4, d=6, seed=1)
        rng = np.random.default_rng(9)
        prev, nxt = _images(rng)
        cond = embed_conditions(enc, "x", prev, nxt, dropout_p=1.0, rng=rng)
        assert np.all(cond.concatenated == 0)
        assert np.all(cond.text_tokens == 0)
        assert np.all(cond.image_prev == 0)

    def test_length_property(self):
        enc = EncoderBank(l_t=4, l_i=9, d=3, seed=2)
        rng = np.random.default_rng(10)
        prev, nxt = _images(rng)
        cond = embed_conditions(enc, "s", prev, nxt)
        assert isinstance(cond, ConditionEmbedding)
        assert cond.length == 4 + 2 * 9
