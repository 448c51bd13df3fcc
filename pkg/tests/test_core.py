"""Domain types: span arithmetic, ground truth consistency, config checks."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vtground.core import (
    ConfigError,
    FeatureSequence,
    GroundTruth,
    InvalidSpan,
    LossWeights,
    ModelConfig,
    MomentSpan,
    Prediction,
    RangeError,
    ablation_config,
    desk_config,
    ground_truth_from_spans,
    span_cw_to_se,
    span_se_to_cw,
    validate_config,
)


class TestSpanArithmetic:
    def test_full_video_span(self):
        assert span_cw_to_se(MomentSpan(0.5, 1.0)) == (0.0, 1.0)

    def test_left_half(self):
        assert span_cw_to_se(MomentSpan(0.25, 0.5)) == pytest.approx((0.0, 0.5))

    def test_centered_fifth(self):
        assert span_cw_to_se(MomentSpan(0.5, 0.2)) == pytest.approx((0.4, 0.6))

    def test_se_to_cw(self):
        span = span_se_to_cw(0.0, 1.0)
        assert (span.center, span.width) == (0.5, 1.0)
        span = span_se_to_cw(0.4, 0.6)
        assert (span.center, span.width) == pytest.approx((0.5, 0.2))

    def test_inverted_endpoints_rejected(self):
        with pytest.raises(InvalidSpan):
            span_se_to_cw(0.6, 0.4)

    def test_out_of_range_span_rejected(self):
        with pytest.raises(InvalidSpan):
            MomentSpan(center=0.1, width=0.5)  # start would be -0.15

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_roundtrip_identity(self, a, b):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-6:
            return
        span = span_se_to_cw(lo, hi)
        s, e = span_cw_to_se(span)
        assert abs(s - lo) <= 1e-9 and abs(e - hi) <= 1e-9


class TestGroundTruth:
    def test_relevance_derived_from_saliency(self):
        gt = GroundTruth(spans=(MomentSpan(0.5, 0.5),), saliency=np.array([0, 3, 4, 0]))
        np.testing.assert_array_equal(gt.relevance, [0, 1, 1, 0])

    def test_inconsistent_relevance_rejected(self):
        with pytest.raises(ConfigError):
            GroundTruth(spans=(), saliency=np.array([0, 4]), relevance=np.array([1, 1]))

    def test_saliency_scale_bounds(self):
        with pytest.raises(RangeError):
            GroundTruth(spans=(), saliency=np.array([0, 5]))

    def test_from_spans_marks_covered_clips(self):
        gt = ground_truth_from_spans([MomentSpan(0.5, 0.5)], n_clips=8)
        np.testing.assert_array_equal(gt.relevance, [0, 0, 1, 1, 1, 1, 0, 0])
        assert set(gt.saliency[gt.relevance == 1]) == {4}

    @given(st.integers(2, 40), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
    def test_spans_imply_relevance(self, n_clips, width, frac):
        width = min(width, 1.0)
        center = width / 2 + frac * (1.0 - width)
        gt = ground_truth_from_spans([MomentSpan(center, width)], n_clips)
        assert np.all((gt.relevance == 1) == (gt.saliency >= 1))


class TestFeatureSequence:
    def test_rejects_non_finite(self):
        from vtground.core import NumericsError

        with pytest.raises(NumericsError):
            FeatureSequence(clips=np.array([[np.inf, 0.0]]), words=np.zeros((1, 2)),
                            video_id="v", query_id="q")

    def test_rejects_empty_query(self):
        from vtground.core import EmptyQuery

        with pytest.raises(EmptyQuery):
            FeatureSequence(clips=np.zeros((2, 3)), words=np.zeros((0, 3)),
                            video_id="v", query_id="q")


class TestPrediction:
    def test_spans_must_be_sorted(self):
        spans = ((MomentSpan(0.5, 0.2), 0.1), (MomentSpan(0.5, 0.4), 0.9))
        with pytest.raises(ConfigError):
            Prediction(spans=spans, saliency=np.zeros(4))

    def test_confidence_bounds(self):
        with pytest.raises(RangeError):
            Prediction(spans=((MomentSpan(0.5, 0.2), 1.5),), saliency=np.zeros(4))


class TestConfigValidation:
    def test_paper_scale_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.hidden == 256 and cfg.n_dummies == 45 and cfg.pool_size == 10
        assert cfg.top_k == 1 and cfg.enc_layers == 3 and cfg.dec_layers == 3
        assert cfg.aca_layers == 2 and cfg.dummy_enc_layers == 2
        assert cfg.moment_enc_layers == 1 and cfg.sentence_enc_layers == 1
        assert validate_config(cfg) is cfg

    def test_topk_exceeding_pool_rejected(self):
        with pytest.raises(ConfigError):
            validate_config(ModelConfig(top_k=11, pool_size=10))

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            validate_config(ModelConfig(hidden=256, n_heads=7))

    def test_cross_attention_needs_a_layer(self):
        with pytest.raises(ConfigError):
            validate_config(ModelConfig(aca_layers=0, use_cross_attention=True))

    def test_desk_config_valid(self):
        cfg = desk_config()
        assert cfg.hidden == 32 and validate_config(cfg) is cfg


class TestAblationRows:
    def test_row_a_disables_everything(self):
        cfg = ablation_config("a")
        assert not cfg.use_cross_attention and not cfg.use_dummies
        assert not cfg.use_correlation and not cfg.use_saliency_detector

    def test_row_progression(self):
        flags = ["use_cross_attention", "use_dummies", "use_dummy_encoder",
                 "use_dummy_losses", "use_correlation", "use_saliency_detector"]
        for i, row in enumerate("bcdefg"):
            cfg = ablation_config(row)
            for j, flag in enumerate(flags):
                assert getattr(cfg, flag) == (j <= i), (row, flag)

    def test_unknown_row_rejected(self):
        with pytest.raises(ConfigError):
            ablation_config("z")


class TestLossWeights:
    def test_defaults_follow_training_recipe(self):
        w = LossWeights()
        assert (w.hl, w.l1, w.giou, w.ce) == (1.0, 10.0, 1.0, 4.0)
        assert (w.ortho, w.align, w.distill) == (1.0, 1.0, 1.0)
        assert w.tau_rank == 0.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(l1=-1.0)

    def test_zero_temperature_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(tau_rank=0.0)
