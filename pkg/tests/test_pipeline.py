"""Pipeline wiring: forward contracts, ablation toggles, determinism,
checkpoint round trips, training-loop behavior and the gradient harness."""

import numpy as np
import pytest

import vtground.attention as attn_mod
from vtground import autodiff as ad
from vtground.autodiff import Tensor
from vtground.core import LossWeights, NumericsError, ablation_config, desk_config
from vtground.data import SynthSpec, generate_synthetic
from vtground.objectives import total_loss
from vtground.pipeline import (
    GroundingModel,
    TrainConfig,
    batch_losses,
    gradient_check,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def records():
    spec = SynthSpec(seed=5, n_pairs=8, n_clips=12, d_feat=16)
    return generate_synthetic(spec)


def tiny_cfg(**overrides):
    base = dict(hidden=16, n_heads=2, d_feat=16, n_dummies=3, pool_size=4, top_k=2,
                n_moment_queries=4, enc_layers=1, dec_layers=1, aca_layers=1,
                dummy_enc_layers=1)
    base.update(overrides)
    return desk_config(**base)


class TestForwardContracts:
    def test_debug_invariants_on_random_forwards(self, records):
        model = GroundingModel(tiny_cfg(), seed=0)
        for rec in records:
            res = model.forward(rec.features, rec.gt, training=True,
                                rng=np.random.default_rng(0), debug=True)
            inter = res.intermediates()
            assert inter["correspondence"].shape == (rec.features.n_clips,)
            assert inter["attention"].shape[1] == rec.features.n_words + 3
            assert "guidance" in inter and "candidate_weights" in inter

    def test_inference_skips_correlation_branch(self, records):
        model = GroundingModel(tiny_cfg(), seed=0)
        res = model.forward(records[0].features, records[0].gt, training=False)
        assert res.prototypes is None and res.guidance is None

    def test_prediction_is_well_formed(self, records):
        model = GroundingModel(tiny_cfg(), seed=0)
        res = model.forward(records[0].features)
        pred = res.prediction
        assert len(pred.spans) == 4
        confs = [c for _, c in pred.spans]
        assert confs == sorted(confs, reverse=True)
        assert pred.saliency.shape == (records[0].features.n_clips,)

    def test_row_a_uses_fusion_and_plain_token(self, records):
        model = GroundingModel(ablation_config("a", tiny_cfg()), seed=0)
        res = model.forward(records[0].features, records[0].gt, training=True,
                            rng=np.random.default_rng(0))
        assert res.attention is None
        assert res.candidate_w is None
        assert model.plain_token is not None

    def test_row_c_skips_dummy_encoder(self, records):
        model = GroundingModel(ablation_config("c", tiny_cfg()), seed=0)
        res = model.forward(records[0].features, records[0].gt, training=True)
        np.testing.assert_array_equal(res.encoded_dummies.data, model.dummies.data)

    def test_parameter_count_is_config_function(self):
        a = GroundingModel(tiny_cfg(), seed=0)
        b = GroundingModel(tiny_cfg(), seed=1)
        assert a.bag.names() == b.bag.names()
        assert all(a.bag[n].data.shape == b.bag[n].data.shape for n in a.bag.names())


class TestBatchLosses:
    def test_breakdown_keys_and_finite(self, records):
        state = init_state(tiny_cfg(), seed=0)
        parts, breakdown = batch_losses(state.model, records[:4], state.weights, state.rng)
        for key in ("mr", "hl", "attn", "bce", "ortho", "align", "distill"):
            assert key in parts
            assert np.isfinite(breakdown[key])
        total = total_loss(parts, state.weights)
        assert np.isfinite(total.item())

    def test_row_b_has_no_dummy_or_correlation_losses(self, records):
        state = init_state(ablation_config("b", tiny_cfg()), seed=0)
        _, breakdown = batch_losses(state.model, records[:4], state.weights, state.rng)
        for key in ("bce", "ortho", "attn", "align", "distill"):
            assert breakdown[key] == 0.0
        assert breakdown["mr"] > 0.0

    def test_msd_toggle_reproduces_previous_row_exactly(self, records):
        """Row (g) with the saliency detector disabled is the row (f)
        configuration: identical losses under the same seed."""
        cfg_f = ablation_config("f", tiny_cfg())
        cfg_g_off = ablation_config("g", tiny_cfg()).replace(use_saliency_detector=False)
        assert cfg_f == cfg_g_off
        s1 = init_state(cfg_f, seed=3)
        s2 = init_state(cfg_g_off, seed=3)
        _, b1 = batch_losses(s1.model, records[:4], s1.weights, s1.rng)
        _, b2 = batch_losses(s2.model, records[:4], s2.weights, s2.rng)
        assert b1 == b2

    def test_single_record_batch_skips_negative_pair(self, records):
        state = init_state(tiny_cfg(), seed=0)
        _, breakdown = batch_losses(state.model, records[:1], state.weights, state.rng)
        assert breakdown["neg"] == 0.0


class TestTraining:
    def test_zero_epochs_leaves_parameters_untouched(self, records):
        cfg = tiny_cfg()
        state = init_state(cfg, seed=0)
        before = {k: v.copy() for k, v in state.model.bag.state().items()}
        state = train(records, cfg, train_cfg=TrainConfig(epochs=0, batch_size=4),
                      seed=0, state=state)
        after = state.model.bag.state()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_identical_seeds_identical_curves(self, records):
        cfg = tiny_cfg()
        tc = TrainConfig(epochs=3, batch_size=4, lr=1e-3)
        h1 = train(records, cfg, train_cfg=tc, seed=7).history
        h2 = train(records, cfg, train_cfg=tc, seed=7).history
        assert [e["loss"] for e in h1] == [e["loss"] for e in h2]
        assert [e["parts"] for e in h1] == [e["parts"] for e in h2]

    def test_different_seeds_differ(self, records):
        cfg = tiny_cfg()
        tc = TrainConfig(epochs=2, batch_size=4, lr=1e-3)
        h1 = train(records, cfg, train_cfg=tc, seed=1).history
        h2 = train(records, cfg, train_cfg=tc, seed=2).history
        assert [e["loss"] for e in h1] != [e["loss"] for e in h2]

    def test_nan_aborts_with_numerics_error(self, records):
        cfg = tiny_cfg()
        state = init_state(cfg, seed=0)
        state.model.bag["input.vid.w"].data[0, 0] = np.nan
        with pytest.raises(NumericsError):
            train(records, cfg, train_cfg=TrainConfig(epochs=1, batch_size=4),
                  seed=0, state=state)


class TestCheckpoints:
    def test_roundtrip_reproduces_forward_outputs(self, records, tmp_path):
        cfg = tiny_cfg()
        state = train(records, cfg, train_cfg=TrainConfig(epochs=1, batch_size=4), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        restored = load_checkpoint(path)
        with ad.no_grad():
            a = state.model.forward(records[0].features).prediction
            b = restored.model.forward(records[0].features).prediction
        np.testing.assert_array_equal(a.saliency, b.saliency)
        assert [(s.center, s.width, c) for s, c in a.spans] == \
               [(s.center, s.width, c) for s, c in b.spans]

    def test_save_load_save_is_byte_identical(self, records, tmp_path):
        cfg = tiny_cfg()
        state = train(records, cfg, train_cfg=TrainConfig(epochs=1, batch_size=4), seed=0)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(state, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted_run(self, records, tmp_path):
        cfg = tiny_cfg()
        tc = TrainConfig(epochs=4, batch_size=4, lr=1e-3)
        full = train(records, cfg, train_cfg=tc, seed=9)

        half = train(records, cfg, train_cfg=TrainConfig(epochs=2, batch_size=4, lr=1e-3), seed=9)
        path = tmp_path / "half.ckpt"
        save_checkpoint(half, path)
        resumed = load_checkpoint(path)
        resumed = train(records, cfg, train_cfg=tc, seed=9, state=resumed)
        assert [e["loss"] for e in full.history[2:]] == [e["loss"] for e in resumed.history]


class TestGradientHarness:
    def test_full_suite_passes(self):
        report = gradient_check(seed=1, coords_per_group=2)
        assert all(r["passed"] for r in report.values())
        assert set(report) == {"bce", "ortho", "align", "distill", "mr",
                               "margin", "rank", "neg"}

    def test_corrupted_gradient_is_flagged(self, monkeypatch):
        """Harness self-test: an op whose backward doubles the true gradient
        must be reported as a failure."""
        real = attn_mod.loss_bce

        def corrupted(corr, relevance):
            out = real(corr, relevance)

            def backward(g):
                ad._acc(out, 2.0 * g)

            return ad._make(out.data.copy(), (out,), backward)

        monkeypatch.setattr(attn_mod, "loss_bce", corrupted)
        import vtground.pipeline as pipeline_mod

        monkeypatch.setattr(pipeline_mod.attn_mod, "loss_bce", corrupted)
        report = gradient_check(seed=1, coords_per_group=2, terms=("bce",))
        assert not report["bce"]["passed"]
