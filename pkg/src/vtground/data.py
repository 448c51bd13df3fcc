"""Synthetic grounding-pair generation plus JSONL / binary-feature I/O.

The generator plants one contiguous concept-aligned moment per pair:
moment clips sit near the mean of the query's concept vectors with small
noise, background clips are drawn from unrelated concepts with large noise.
With ``noise_in`` well below ``noise_out`` the task is separable, which is
what the desk-scale experiments rely on.

File formats (stable external interfaces):
  * dataset JSONL -- one object per line with qid, vid, query, duration,
    relevant_windows ([start_s, end_s] pairs) and saliency_scores (per clip,
    a list of annotator scores 0..4); feature matrices live in sidecar
    binary files under ``features/`` keyed by vid / qid,
  * CGFEAT01 -- 8-byte magic ``CGFEAT01``, uint32 rows, uint32 cols
    (little-endian), then row-major float32 payload,
  * prediction JSONL -- qid, pred_relevant_windows
    ([start_s, end_s, confidence]), pred_saliency_scores.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    FeatureSequence,
    GroundTruth,
    IoError,
    MomentSpan,
    ParseError,
    Prediction,
    RangeError,
    span_cw_to_se,
    span_se_to_cw,
)

FEATURE_MAGIC = b"CGFEAT01"
PARAM_MAGIC = b"CGPARM01"  # same layout, float64 payload (checkpoints)

DEFAULT_CLIP_SECONDS = 2.0


# -- binary feature format -------------------------------------------------------


def write_feature_matrix(path: Path | str, matrix: np.ndarray, magic: bytes = FEATURE_MAGIC) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ConfigError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    dtype = "<f4" if magic == FEATURE_MAGIC else "<f8"
    payload = np.ascontiguousarray(matrix, dtype=dtype)
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_feature_matrix(path: Path | str, magic: bytes = FEATURE_MAGIC) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != magic:
        raise ParseError(f"{path}: bad magic, expected {magic!r}")
    rows, cols = struct.unpack("<II", blob[8:16])
    dtype = "<f4" if magic == FEATURE_MAGIC else "<f8"
    itemsize = 4 if magic == FEATURE_MAGIC else 8
    expected = 16 + rows * cols * itemsize
    if len(blob) != expected:
        raise ParseError(f"{path}: payload size {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype=dtype, offset=16).reshape(rows, cols)
    return data.astype(np.float64)


# -- synthetic generator -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic dataset."""

    seed: int = 0
    n_pairs: int = 200
    n_clips: int = 32           # L_v
    d_feat: int = 64
    n_concepts: int = 12
    words_per_query: tuple[int, int] = (2, 4)
    moment_fraction: tuple[float, float] = (0.2, 0.5)
    noise_in: float = 0.05
    noise_out: float = 0.5
    clip_seconds: float = DEFAULT_CLIP_SECONDS

    def __post_init__(self):
        lo, hi = self.moment_fraction
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"moment_fraction {self.moment_fraction} must sit inside (0, 1)")
        wl, wh = self.words_per_query
        if not (1 <= wl <= wh):
            raise ConfigError(f"words_per_query {self.words_per_query} invalid")
        if wh >= self.n_concepts:
            raise ConfigError("need more concepts than words per query")
        if self.noise_in < 0 or self.noise_out <= 0:
            raise ConfigError("noise_in must be >= 0 and noise_out > 0")
        if self.n_pairs < 1 or self.n_clips < 2 or self.d_feat < 1:
            raise ConfigError("n_pairs, n_clips, d_feat out of range")

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "n_pairs": self.n_pairs, "n_clips": self.n_clips,
            "d_feat": self.d_feat, "n_concepts": self.n_concepts,
            "words_per_query": list(self.words_per_query),
            "moment_fraction": list(self.moment_fraction),
            "noise_in": self.noise_in, "noise_out": self.noise_out,
            "clip_seconds": self.clip_seconds,
        }

    @staticmethod
    def from_json(obj: dict) -> "SynthSpec":
        kw = dict(obj)
        for key in ("words_per_query", "moment_fraction"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return SynthSpec(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from exc


@dataclass(frozen=True)
class DatasetRecord:
    features: FeatureSequence
    gt: GroundTruth
    duration_s: float

    def __post_init__(self):
        if self.gt.n_clips != self.features.n_clips:
            raise ConfigError("saliency length must equal the number of clips")


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _quantize_saliency(noise_norms: np.ndarray, noise_in: float, d_feat: int) -> np.ndarray:
    """Map per-clip noise magnitude onto saliency levels 4 (clean) down to 1.

    The divisor is 1.4x the typical noise norm, so most moment clips land on
    level 4 with a small minority at 3; zero noise maps exactly to level 4.
    """
    if noise_in == 0.0:
        return np.full(noise_norms.shape, 4, dtype=np.int64)
    scale = 1.4 * noise_in * np.sqrt(d_feat)
    levels = 4 - np.floor(noise_norms / scale).astype(np.int64)
    return np.clip(levels, 1, 4)


def generate_synthetic(spec: SynthSpec) -> list[DatasetRecord]:
    """Deterministic dataset: identical spec -> byte-identical records."""
    concept_rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    concepts = _unit_rows(concept_rng, spec.n_concepts, spec.d_feat)
    eos = _unit_rows(concept_rng, 1, spec.d_feat)[0]  # shared end-of-sequence token

    records = []
    for idx in range(spec.n_pairs):
        rng = np.random.default_rng([spec.seed, 1, idx])
        n_words = int(rng.integers(spec.words_per_query[0], spec.words_per_query[1] + 1))
        query_concepts = rng.choice(spec.n_concepts, size=n_words, replace=False)
        words = concepts[query_concepts] + rng.normal(scale=spec.noise_in, size=(n_words, spec.d_feat))
        words = np.vstack([words, eos])

        frac = rng.uniform(*spec.moment_fraction)
        width = max(1, int(round(frac * spec.n_clips)))
        width = min(width, spec.n_clips - 1)
        start = int(rng.integers(0, spec.n_clips - width + 1))

        target = concepts[query_concepts].mean(axis=0)
        others = np.setdiff1d(np.arange(spec.n_concepts), query_concepts)
        clips = np.empty((spec.n_clips, spec.d_feat))
        saliency = np.zeros(spec.n_clips, dtype=np.int64)
        bg_choice = rng.choice(others, size=spec.n_clips)
        bg_noise = rng.normal(scale=spec.noise_out, size=(spec.n_clips, spec.d_feat))
        in_noise = rng.normal(scale=spec.noise_in, size=(spec.n_clips, spec.d_feat)) if spec.noise_in > 0 \
            else np.zeros((spec.n_clips, spec.d_feat))
        for i in range(spec.n_clips):
            if start <= i < start + width:
                clips[i] = target + in_noise[i]
            else:
                clips[i] = concepts[bg_choice[i]] + bg_noise[i]
        norms = np.linalg.norm(in_noise[start:start + width], axis=1)
        saliency[start:start + width] = _quantize_saliency(norms, spec.noise_in, spec.d_feat)

        duration = spec.n_clips * spec.clip_seconds
        span = span_se_to_cw(start / spec.n_clips, (start + width) / spec.n_clips)
        features = FeatureSequence(
            clips=clips, words=words,
            video_id=f"synth_v{idx:05d}", query_id=f"synth_q{idx:05d}",
        )
        gt = GroundTruth(spans=(span,), saliency=saliency)
        records.append(DatasetRecord(features=features, gt=gt, duration_s=duration))
    return records


# -- JSONL dataset I/O ----------------------------------------------------------------


def _sidecar_dir(jsonl_path: Path) -> Path:
    return jsonl_path.parent / "features"


def save_dataset(records: list[DatasetRecord], jsonl_path: Path | str) -> None:
    """Write records as JSONL plus CGFEAT01 sidecars under ``features/``."""
    jsonl_path = Path(jsonl_path)
    feat_dir = _sidecar_dir(jsonl_path)
    feat_dir.mkdir(parents=True, exist_ok=True)
    try:
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            for rec in records:
                windows = []
                for span in rec.gt.spans:
                    s, e = span_cw_to_se(span)
                    windows.append([round(s * rec.duration_s, 6), round(e * rec.duration_s, 6)])
                obj = {
                    "qid": rec.features.query_id,
                    "vid": rec.features.video_id,
                    "query": f"synthetic query {rec.features.query_id}",
                    "duration": rec.duration_s,
                    "relevant_windows": windows,
                    "saliency_scores": [[int(v)] for v in rec.gt.saliency],
                }
                fh.write(json.dumps(obj) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {jsonl_path}: {exc}") from exc
    for rec in records:
        write_feature_matrix(feat_dir / f"{rec.features.video_id}.cgfeat", rec.features.clips)
        write_feature_matrix(feat_dir / f"{rec.features.query_id}.cgfeat", rec.features.words)


def load_jsonl(jsonl_path: Path | str, clip_seconds: float = DEFAULT_CLIP_SECONDS) -> list[DatasetRecord]:
    """Load a JSONL dataset; saliency per clip is the rounded mean over
    annotator scores and windows are normalized by the video duration."""
    jsonl_path = Path(jsonl_path)
    feat_dir = _sidecar_dir(jsonl_path)
    try:
        lines = jsonl_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {jsonl_path}: {exc}") from exc

    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        try:
            qid, vid = str(obj["qid"]), str(obj["vid"])
            duration = float(obj["duration"])
            windows = obj["relevant_windows"]
            raw_saliency = obj["saliency_scores"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"missing or malformed field: {exc}", line=lineno) from exc

        spans = []
        for win in windows:
            s, e = float(win[0]), float(win[1])
            if s < -1e-6 or e > duration + 1e-6:
                raise RangeError(f"line {lineno}: window [{s}, {e}] outside [0, {duration}]")
            spans.append(span_se_to_cw(max(s, 0.0) / duration, min(e, duration) / duration))

        n_clips = int(np.ceil(duration / clip_seconds))
        saliency = np.zeros(n_clips, dtype=np.int64)
        for i, scores in enumerate(raw_saliency[:n_clips]):
            scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
            saliency[i] = int(np.floor(scores.mean() + 0.5))  # rounded (half-up) mean

        clips = read_feature_matrix(feat_dir / f"{vid}.cgfeat")
        words = read_feature_matrix(feat_dir / f"{qid}.cgfeat")
        if clips.shape[0] != n_clips:
            raise ParseError(
                f"{vid}: {clips.shape[0]} clip features but duration implies {n_clips}", line=lineno)
        features = FeatureSequence(clips=clips, words=words, video_id=vid, query_id=qid)
        gt = GroundTruth(spans=tuple(spans), saliency=saliency)
        records.append(DatasetRecord(features=features, gt=gt, duration_s=duration))
    return records


# -- prediction I/O ---------------------------------------------------------------------


def save_predictions(preds: list[tuple[str, Prediction, float]], path: Path | str) -> None:
    """Write (qid, prediction, duration_s) triples as JSONL. Spans must
    already be sorted by descending confidence (Prediction enforces it)."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for qid, pred, duration in preds:
                windows = []
                for span, conf in pred.spans:
                    s, e = span_cw_to_se(span)
                    windows.append([s * duration, e * duration, conf])
                obj = {
                    "qid": qid,
                    "duration": duration,
                    "pred_relevant_windows": windows,
                    "pred_saliency_scores": [float(v) for v in pred.saliency],
                }
                fh.write(json.dumps(obj) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_predictions(path: Path | str) -> list[tuple[str, Prediction, float]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        duration = float(obj["duration"])
        spans = tuple(
            (span_se_to_cw(w[0] / duration, w[1] / duration), float(w[2]))
            for w in obj["pred_relevant_windows"]
        )
        pred = Prediction(spans=spans, saliency=np.asarray(obj["pred_saliency_scores"]))
        out.append((str(obj["qid"]), pred, duration))
    return out


def dataset_fingerprint(jsonl_path: Path | str) -> str:
    """Content hash of the JSONL file plus every feature sidecar."""
    import hashlib

    jsonl_path = Path(jsonl_path)
    h = hashlib.sha256()
    h.update(jsonl_path.read_bytes())
    feat_dir = _sidecar_dir(jsonl_path)
    if feat_dir.is_dir():
        for f in sorted(feat_dir.iterdir()):
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()
