"""Adaptive cross-attention: dummy conditioning, activation variants, the
query correspondence and its two losses. Exact values come from independent
softmax / cross-entropy computations on hand-built layers."""

import numpy as np
import pytest

from vtground import autodiff as ad
from vtground.attention import (
    AdaptiveCrossAttention,
    AdaptiveCrossAttentionLayer,
    DummyEncoder,
    loss_bce,
    loss_ortho,
    query_correspondence,
)
from vtground.autodiff import Tensor
from vtground.core import ShapeError
from vtground.nn import ParamBag

LN2 = np.log(2.0)


def identity_layer(h=2):
    """ACA layer rigged so attention logits equal raw clip-key dot products
    (scaled) and the fused output is clips + attended values: identity q/k/v
    and out projections, zeroed feed-forward."""
    bag = ParamBag()
    rng = np.random.default_rng(0)
    layer = AdaptiveCrossAttentionLayer(bag, "aca", h, 1, rng)
    eye = np.eye(h)
    for lin in (layer.q_proj, layer.k_proj, layer.v_proj, layer.out_proj):
        lin.w.data = eye.copy()
        lin.b.data = np.zeros(h)
    for lin in (layer.ffn.lin1, layer.ffn.lin2):
        lin.w.data = np.zeros_like(lin.w.data)
        lin.b.data = np.zeros_like(lin.b.data)
    # compensate the layer-norm epsilon so LN([1, -1]) is exactly [1, -1]
    layer.ln1.gain.data = np.full(h, np.sqrt(1.0 + 1e-5))
    return layer


def rigged_inputs(h=2):
    """One clip whose layer-normed query is [1, -1]; word keys built so the
    scaled logits over (word1, word2, dummy) come out (ln 2, 0, 0)."""
    clips = Tensor(np.array([[1.0, -1.0]]))
    scale = np.sqrt(h)  # undo the 1/sqrt(h_head) scaling
    words = Tensor(np.array([
        [LN2 * scale / 2, -LN2 * scale / 2],   # q . k / sqrt(h) = ln 2
        [0.3, 0.3],                            # orthogonal to q -> 0
    ]))
    dummies = Tensor(np.array([[0.7, 0.7]]))   # orthogonal to q -> 0
    return clips, words, dummies


class TestAdaptiveCrossAttentionExactValues:
    def test_uniform_logits_split_equally(self):
        layer = identity_layer()
        clips = Tensor(np.array([[1.0, -1.0]]))
        words = Tensor(np.tile([0.2, 0.2], (3, 1)))    # all orthogonal to q
        dummies = Tensor(np.array([[0.5, 0.5]]))
        _, weights = layer(clips, words, dummies, "aca")
        np.testing.assert_allclose(weights.data[0, 0], [0.25] * 4, atol=1e-12)
        corr = query_correspondence(ad.tmean(weights, axis=0), 3)
        np.testing.assert_allclose(corr.data, [0.75], atol=1e-12)

    def test_log2_logit_softmax(self):
        """Logits (ln 2, 0, 0) over two words and one dummy give weights
        (0.5, 0.25, 0.25) and correspondence 0.75."""
        layer = identity_layer()
        clips, words, dummies = rigged_inputs()
        fused, weights = layer(clips, words, dummies, "aca")
        np.testing.assert_allclose(weights.data[0, 0], [0.5, 0.25, 0.25], atol=1e-9)
        corr = query_correspondence(ad.tmean(weights, axis=0), 2)
        np.testing.assert_allclose(corr.data, [0.75], atol=1e-9)
        # values cover words only: attended = 0.5 w1 + 0.25 w2, no dummy term
        attended = fused.data[0] - clips.data[0]
        np.testing.assert_allclose(
            attended, 0.5 * words.data[0] + 0.25 * words.data[1], atol=1e-9)

    def test_plain_softmax_ignores_dummies(self):
        layer = identity_layer()
        clips, words, dummies = rigged_inputs()
        _, weights = layer(clips, words, dummies, "plain_softmax")
        np.testing.assert_allclose(weights.data[0, 0, 2:], 0.0)
        np.testing.assert_allclose(weights.data[0, 0, :2].sum(), 1.0, atol=1e-12)
        corr = query_correspondence(ad.tmean(weights, axis=0), 2)
        np.testing.assert_allclose(corr.data, [1.0], atol=1e-12)

    def test_softmax_one_uses_implicit_unit_term(self):
        layer = identity_layer()
        clips, words, dummies = rigged_inputs()
        _, weights = layer(clips, words, dummies, "softmax_one")
        # exp(ln 2) / (1 + 2 + 1), exp(0) / 4
        np.testing.assert_allclose(weights.data[0, 0, :2], [0.5, 0.25], atol=1e-9)
        np.testing.assert_allclose(weights.data[0, 0, 2:], 0.0)

    def test_sigmoid_variant_elementwise(self):
        layer = identity_layer()
        clips, words, dummies = rigged_inputs()
        _, weights = layer(clips, words, dummies, "sigmoid")
        np.testing.assert_allclose(weights.data[0, 0, :2], [2.0 / 3.0, 0.5], atol=1e-9)

    def test_monotone_dummy_effect(self):
        """Raising a dummy key's logit strictly lowers every correspondence."""
        layer = identity_layer()
        clips, words, _ = rigged_inputs()
        base = None
        for bump in (0.0, 0.5, 1.0):
            dummies = Tensor(np.array([[0.7 + bump, 0.7 - bump]]))  # q-aligned part grows
            _, weights = layer(clips, words, dummies, "aca")
            corr = query_correspondence(ad.tmean(weights, axis=0), 2).data[0]
            if base is not None:
                assert corr < base
            base = corr


class TestAttentionInvariants:
    def test_rows_stochastic_and_bounded_on_random_forwards(self):
        rng = np.random.default_rng(42)
        bag = ParamBag()
        stack = AdaptiveCrossAttention(bag, "aca", 16, 4, 2, rng)
        for trial in range(100):
            clips = Tensor(rng.normal(size=(rng.integers(1, 9), 16)))
            words = Tensor(rng.normal(size=(rng.integers(1, 6), 16)))
            dummies = Tensor(rng.normal(size=(rng.integers(1, 5), 16)))
            rec = stack(clips, words, dummies, "aca")
            for per_head in rec.per_head:
                np.testing.assert_allclose(per_head.sum(-1), 1.0, atol=1e-6)
            assert rec.correspondence.data.min() >= -1e-12
            assert rec.correspondence.data.max() <= 1.0 + 1e-12

    def test_correspondence_extremes(self):
        w_all_dummy = Tensor(np.array([[0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(query_correspondence(w_all_dummy, 2).data, [0.0])
        w_all_text = Tensor(np.array([[0.6, 0.4, 0.0]]))
        np.testing.assert_allclose(query_correspondence(w_all_text, 2).data, [1.0])

    def test_correspondence_column_sum_example(self):
        w = Tensor(np.array([[0.5, 0.25, 0.25]]))
        np.testing.assert_allclose(query_correspondence(w, 2).data, [0.75])


class TestDummyEncoder:
    def test_zero_layers_is_identity(self):
        bag = ParamBag()
        enc = DummyEncoder(bag, "de", 8, 2, 0, np.random.default_rng(0))
        dummies = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
        out = enc(dummies, Tensor(np.random.default_rng(2).normal(size=(4, 8))))
        assert out is dummies

    def test_single_word_single_dummy_shape(self):
        bag = ParamBag()
        enc = DummyEncoder(bag, "de", 8, 2, 1, np.random.default_rng(0))
        out = enc(Tensor(np.zeros((1, 8))), Tensor(np.ones((1, 8))))
        assert out.shape == (1, 8)

    def test_different_queries_give_different_encodings(self):
        bag = ParamBag()
        rng = np.random.default_rng(3)
        enc = DummyEncoder(bag, "de", 8, 2, 2, rng)
        dummies = Tensor(rng.normal(size=(3, 8)))
        out_a = enc(dummies, Tensor(rng.normal(size=(4, 8))))
        out_b = enc(dummies, Tensor(rng.normal(size=(4, 8))))
        assert np.abs(out_a.data - out_b.data).max() > 1e-6


class TestBceLoss:
    def test_perfect_prediction_near_zero(self):
        corr = Tensor(np.array([1.0 - 1e-6, 1e-6]))
        assert loss_bce(corr, np.array([1.0, 0.0])).item() < 1e-5

    def test_coin_flip_is_ln2(self):
        corr = Tensor(np.array([0.5, 0.5]))
        assert loss_bce(corr, np.array([1.0, 0.0])).item() == pytest.approx(LN2, abs=1e-9)

    def test_confident_wrong_prediction(self):
        corr = Tensor(np.array([0.9]))
        assert loss_bce(corr, np.array([0.0])).item() == pytest.approx(-np.log(0.1), abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            loss_bce(Tensor(np.array([0.5])), np.array([1.0, 0.0]))

    def test_gradient_matches_hand_formula(self):
        """d/dp of -(a log p + (1-a) log(1-p)) / n = (p - a) / (p (1-p) n)."""
        p = np.array([0.3, 0.8, 0.5])
        a = np.array([1.0, 0.0, 1.0])
        corr = ad.parameter(p.copy(), "corr")
        loss_bce(corr, a).backward()
        expected = (p - a) / (p * (1 - p)) / p.size
        np.testing.assert_allclose(corr.grad, expected, atol=1e-12)


class TestOrthoLoss:
    def test_orthogonal_pair_is_zero(self):
        d = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert loss_ortho(d).item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_pair_is_one(self):
        d = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert loss_ortho(d).item() == pytest.approx(1.0, abs=1e-9)

    def test_single_dummy_is_zero(self):
        assert loss_ortho(Tensor(np.array([[1.0, 2.0]]))).item() == 0.0

    def test_scale_invariance_and_nonnegativity(self):
        rng = np.random.default_rng(5)
        d = rng.normal(size=(4, 8))
        a = loss_ortho(Tensor(d)).item()
        b = loss_ortho(Tensor(d * 37.0)).item()
        assert a == pytest.approx(b, abs=1e-12)
        assert a >= 0.0
