"""Synthetic generator determinism and separability, plus file-format
round trips (dataset JSONL, CGFEAT01 sidecars, prediction JSONL)."""

import json

import numpy as np
import pytest

from vtground.core import MomentSpan, ParseError, Prediction, RangeError, span_cw_to_se
from vtground.data import (
    FEATURE_MAGIC,
    SynthSpec,
    dataset_fingerprint,
    generate_synthetic,
    load_jsonl,
    load_predictions,
    read_feature_matrix,
    save_dataset,
    save_predictions,
    write_feature_matrix,
)


def serialize(records):
    out = []
    for r in records:
        out.append((r.features.clips.tobytes(), r.features.words.tobytes(),
                    r.gt.saliency.tobytes(), tuple((s.center, s.width) for s in r.gt.spans)))
    return out


class TestGenerator:
    def test_deterministic_across_runs(self):
        spec = SynthSpec(seed=7, n_pairs=12, n_clips=16, d_feat=24)
        assert serialize(generate_synthetic(spec)) == serialize(generate_synthetic(spec))

    def test_different_seeds_differ(self):
        a = generate_synthetic(SynthSpec(seed=1, n_pairs=4))
        b = generate_synthetic(SynthSpec(seed=2, n_pairs=4))
        assert serialize(a) != serialize(b)

    def test_shapes(self):
        records = generate_synthetic(SynthSpec(seed=0, n_pairs=200, n_clips=32, d_feat=16))
        assert len(records) == 200
        for r in records[:10]:
            assert r.features.clips.shape == (32, 16)
            assert r.gt.saliency.shape == (32,)

    def test_zero_in_noise_gives_pure_moments(self):
        spec = SynthSpec(seed=3, n_pairs=6, n_clips=16, d_feat=24, noise_in=0.0)
        for rec in generate_synthetic(spec):
            inside = rec.gt.relevance == 1
            assert set(rec.gt.saliency[inside]) == {4}
            # every moment clip equals the concept mean exactly
            moment_clips = rec.features.clips[inside]
            assert np.abs(moment_clips - moment_clips[0]).max() == 0.0

    def test_moment_is_contiguous_and_matches_span(self):
        for rec in generate_synthetic(SynthSpec(seed=5, n_pairs=8, n_clips=20)):
            idx = np.flatnonzero(rec.gt.relevance)
            assert np.array_equal(idx, np.arange(idx[0], idx[-1] + 1))
            start, end = span_cw_to_se(rec.gt.spans[0])
            assert idx[0] == round(start * 20) and idx[-1] + 1 == round(end * 20)

    def test_separability(self):
        """Moment clips sit measurably closer to the word mean than
        background clips do (cosine), across a seed set."""
        for seed in (0, 1, 2):
            spec = SynthSpec(seed=seed, n_pairs=20, noise_in=0.05, noise_out=0.5)
            margins = []
            for rec in generate_synthetic(spec):
                target = rec.features.words[:-1].mean(axis=0)  # drop shared end token
                target /= np.linalg.norm(target)
                sims = rec.features.clips @ target / np.linalg.norm(rec.features.clips, axis=1)
                inside = rec.gt.relevance == 1
                margins.append(sims[inside].mean() - sims[~inside].mean())
            assert np.mean(margins) > 0.3


class TestFeatureFormat:
    def test_roundtrip_exact_float32(self, tmp_path):
        mat = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32).astype(np.float64)
        path = tmp_path / "m.cgfeat"
        write_feature_matrix(path, mat)
        np.testing.assert_array_equal(read_feature_matrix(path), mat)

    def test_layout_bytes(self, tmp_path):
        path = tmp_path / "m.cgfeat"
        write_feature_matrix(path, np.zeros((2, 3)))
        blob = path.read_bytes()
        assert blob[:8] == FEATURE_MAGIC
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:16], "little") == 3
        assert len(blob) == 16 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.cgfeat"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ParseError):
            read_feature_matrix(path)


class TestDatasetJsonl:
    def test_roundtrip_preserves_spans_and_saliency(self, tmp_path):
        records = generate_synthetic(SynthSpec(seed=9, n_pairs=6, n_clips=10))
        path = tmp_path / "dataset.jsonl"
        save_dataset(records, path)
        loaded = load_jsonl(path, clip_seconds=2.0)
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            np.testing.assert_array_equal(a.gt.saliency, b.gt.saliency)
            for sa, sb in zip(a.gt.spans, b.gt.spans):
                assert abs(sa.center - sb.center) < 1e-6
                assert abs(sa.width - sb.width) < 1e-6
            np.testing.assert_allclose(a.features.clips, b.features.clips, atol=1e-6)

    def test_window_normalization(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        (tmp_path / "features").mkdir()
        write_feature_matrix(tmp_path / "features" / "v0.cgfeat", np.zeros((10, 4)))
        write_feature_matrix(tmp_path / "features" / "q0.cgfeat", np.ones((3, 4)))
        line = {"qid": "q0", "vid": "v0", "query": "x", "duration": 20.0,
                "relevant_windows": [[0.0, 10.0]],
                "saliency_scores": [[4]] * 10}
        path.write_text(json.dumps(line) + "\n")
        rec = load_jsonl(path, clip_seconds=2.0)[0]
        assert rec.gt.spans[0].center == pytest.approx(0.25)
        assert rec.gt.spans[0].width == pytest.approx(0.5)
        assert rec.features.n_clips == 10

    def test_multi_annotator_saliency_rounds_mean(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        (tmp_path / "features").mkdir()
        write_feature_matrix(tmp_path / "features" / "v0.cgfeat", np.zeros((2, 4)))
        write_feature_matrix(tmp_path / "features" / "q0.cgfeat", np.ones((1, 4)))
        line = {"qid": "q0", "vid": "v0", "query": "x", "duration": 4.0,
                "relevant_windows": [[0.0, 4.0]],
                "saliency_scores": [[1, 2], [3, 4, 4]]}  # means 1.5 -> 2, 3.67 -> 4
        path.write_text(json.dumps(line) + "\n")
        rec = load_jsonl(path, clip_seconds=2.0)[0]
        np.testing.assert_array_equal(rec.gt.saliency, [2, 4])

    def test_empty_file_gives_empty_dataset(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text("")
        assert load_jsonl(path) == []

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text("{\n")
        with pytest.raises(ParseError) as err:
            load_jsonl(path)
        assert err.value.line == 1

    def test_out_of_range_window_rejected(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        (tmp_path / "features").mkdir()
        write_feature_matrix(tmp_path / "features" / "v0.cgfeat", np.zeros((2, 4)))
        write_feature_matrix(tmp_path / "features" / "q0.cgfeat", np.ones((1, 4)))
        line = {"qid": "q0", "vid": "v0", "query": "x", "duration": 4.0,
                "relevant_windows": [[0.0, 9.0]], "saliency_scores": [[0], [0]]}
        path.write_text(json.dumps(line) + "\n")
        with pytest.raises(RangeError):
            load_jsonl(path)

    def test_fingerprint_stable_and_content_sensitive(self, tmp_path):
        records = generate_synthetic(SynthSpec(seed=2, n_pairs=3, n_clips=8))
        p1, p2 = tmp_path / "a" / "d.jsonl", tmp_path / "b" / "d.jsonl"
        p1.parent.mkdir()
        p2.parent.mkdir()
        save_dataset(records, p1)
        save_dataset(records, p2)
        assert dataset_fingerprint(p1) == dataset_fingerprint(p2)
        save_dataset(generate_synthetic(SynthSpec(seed=3, n_pairs=3, n_clips=8)), p2)
        assert dataset_fingerprint(p1) != dataset_fingerprint(p2)


class TestPredictionJsonl:
    def test_seconds_conversion(self, tmp_path):
        pred = Prediction(spans=((MomentSpan(0.25, 0.5), 0.9),), saliency=np.zeros(10))
        path = tmp_path / "preds.jsonl"
        save_predictions([("q0", pred, 20.0)], path)
        obj = json.loads(path.read_text().splitlines()[0])
        assert obj["pred_relevant_windows"][0][:2] == [0.0, 10.0]
        assert obj["pred_relevant_windows"][0][2] == pytest.approx(0.9)

    def test_roundtrip_within_tolerance(self, tmp_path):
        rng = np.random.default_rng(4)
        preds = []
        for i in range(5):
            w = float(rng.uniform(0.1, 0.6))
            c = float(rng.uniform(w / 2, 1 - w / 2))
            spans = ((MomentSpan(c, w), 0.8), (MomentSpan(0.5, 0.9), 0.2))
            preds.append((f"q{i}", Prediction(spans=spans, saliency=rng.normal(size=6)), 30.0))
        path = tmp_path / "preds.jsonl"
        save_predictions(preds, path)
        loaded = load_predictions(path)
        for (qa, pa, da), (qb, pb, db) in zip(preds, loaded):
            assert qa == qb and da == db
            for (sa, ca), (sb, cb) in zip(pa.spans, pb.spans):
                assert abs(sa.center - sb.center) < 1e-6
                assert abs(sa.width - sb.width) < 1e-6
                assert abs(ca - cb) < 1e-9
            np.testing.assert_allclose(pa.saliency, pb.saliency, atol=1e-9)

    def test_empty_prediction_list_gives_empty_file(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        save_predictions([], path)
        assert path.read_text() == ""
        assert load_predictions(path) == []
