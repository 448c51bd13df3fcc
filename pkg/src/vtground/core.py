"""Shared domain types, span arithmetic and configuration validation.

All types here are immutable value objects (frozen dataclasses over numpy
arrays that are treated as read-only), so they are safe to share across
threads and across the data / model / evaluation layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

SALIENCY_LEVELS = 5  # integer ground-truth saliency scale 0..4
_SPAN_TOL = 1e-6


# -- errors -------------------------------------------------------------------


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class InvalidSpan(ValueError):
    """A temporal span with start >= end or out-of-range endpoints."""


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class RangeError(ValueError):
    """A value (e.g. an annotation window) outside its allowed range."""


class IoError(OSError):
    """Unreadable or unwritable artifact path."""


class ShapeError(ValueError):
    """Mismatched array shapes between quantities that must align."""


class NumericsError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class EmptyQuery(ValueError):
    """Text query with zero tokens."""


class EmptyInstance(ValueError):
    """Instance with neither positive nor negative clips."""


# -- spans --------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSpan:
    """A contiguous temporal span, normalized to the [0, 1] video extent and
    parameterized by center and width."""

    center: float
    width: float

    def __post_init__(self):
        if not (np.isfinite(self.center) and np.isfinite(self.width)):
            raise InvalidSpan(f"non-finite span ({self.center}, {self.width})")
        if self.width <= 0.0 or self.width > 1.0 + _SPAN_TOL:
            raise InvalidSpan(f"width {self.width} outside (0, 1]")
        if self.center - self.width / 2 < -_SPAN_TOL or self.center + self.width / 2 > 1.0 + _SPAN_TOL:
            raise InvalidSpan(f"span ({self.center}, {self.width}) exceeds [0, 1]")


def span_cw_to_se(span: MomentSpan) -> tuple[float, float]:
    """(center, width) -> (start, end), clamped to [0, 1]."""
    start = min(max(span.center - span.width / 2, 0.0), 1.0)
    end = min(max(span.center + span.width / 2, 0.0), 1.0)
    return start, end


def span_se_to_cw(start: float, end: float) -> MomentSpan:
    """(start, end) -> MomentSpan; inverse of :func:`span_cw_to_se`."""
    if start >= end:
        raise InvalidSpan(f"start {start} >= end {end}")
    if start < -_SPAN_TOL or end > 1.0 + _SPAN_TOL:
        raise InvalidSpan(f"({start}, {end}) outside [0, 1]")
    start = max(start, 0.0)
    end = min(end, 1.0)
    return MomentSpan(center=(start + end) / 2, width=end - start)


# -- feature and ground-truth containers ---------------------------------------


@dataclass(frozen=True)
class FeatureSequence:
    """Per-clip video features and per-token text features for one pair."""

    clips: np.ndarray  # (L_v, d_feat)
    words: np.ndarray  # (L_q, d_feat)
    video_id: str
    query_id: str

    def __post_init__(self):
        clips = np.asarray(self.clips, dtype=np.float64)
        words = np.asarray(self.words, dtype=np.float64)
        object.__setattr__(self, "clips", clips)
        object.__setattr__(self, "words", words)
        if clips.ndim != 2 or clips.shape[0] < 1:
            raise ShapeError(f"clips must be (L_v >= 1, d), got {clips.shape}")
        if words.ndim != 2 or words.shape[0] < 1:
            raise EmptyQuery(f"words must be (L_q >= 1, d), got {words.shape}")
        if not (np.isfinite(clips).all() and np.isfinite(words).all()):
            raise NumericsError("non-finite feature entries")

    @property
    def n_clips(self) -> int:
        return self.clips.shape[0]

    @property
    def n_words(self) -> int:
        return self.words.shape[0]


@dataclass(frozen=True)
class GroundTruth:
    """Moment spans plus per-clip saliency levels (0..4) and the derived
    binary relevance (1 iff saliency > 0)."""

    spans: tuple[MomentSpan, ...]
    saliency: np.ndarray  # (L_v,) ints in 0..4
    relevance: np.ndarray = field(default=None)  # (L_v,) ints in {0, 1}

    def __post_init__(self):
        sal = np.asarray(self.saliency, dtype=np.int64)
        object.__setattr__(self, "saliency", sal)
        object.__setattr__(self, "spans", tuple(self.spans))
        if sal.ndim != 1:
            raise ShapeError("saliency must be a vector")
        if sal.min(initial=0) < 0 or sal.max(initial=0) >= SALIENCY_LEVELS:
            raise RangeError(f"saliency levels must lie in 0..{SALIENCY_LEVELS - 1}")
        rel = (sal > 0).astype(np.int64)
        if self.relevance is not None:
            given = np.asarray(self.relevance, dtype=np.int64)
            if given.shape != rel.shape or (given != rel).any():
                raise ConfigError("relevance inconsistent with saliency")
        object.__setattr__(self, "relevance", rel)

    @property
    def n_clips(self) -> int:
        return self.saliency.shape[0]


def ground_truth_from_spans(spans: Sequence[MomentSpan], n_clips: int, level: int = 4) -> GroundTruth:
    """Build a GroundTruth whose saliency is `level` on every clip whose
    center falls inside some span and 0 elsewhere."""
    sal = np.zeros(n_clips, dtype=np.int64)
    centers = (np.arange(n_clips) + 0.5) / n_clips
    for span in spans:
        s, e = span_cw_to_se(span)
        sal[(centers >= s) & (centers <= e)] = level
    return GroundTruth(spans=tuple(spans), saliency=sal)


@dataclass(frozen=True)
class Prediction:
    """Ranked candidate moments plus clip-wise saliency scores."""

    spans: tuple[tuple[MomentSpan, float], ...]  # (span, fg_confidence), desc
    saliency: np.ndarray  # (L_v,) real scores

    def __post_init__(self):
        object.__setattr__(self, "saliency", np.asarray(self.saliency, dtype=np.float64))
        spans = tuple(self.spans)
        object.__setattr__(self, "spans", spans)
        for _, conf in spans:
            if not (0.0 <= conf <= 1.0):
                raise RangeError(f"fg_confidence {conf} outside [0, 1]")
        confs = [c for _, c in spans]
        if any(confs[i] < confs[i + 1] for i in range(len(confs) - 1)):
            raise ConfigError("prediction spans must be sorted by descending confidence")

    @property
    def top1(self) -> MomentSpan | None:
        return self.spans[0][0] if self.spans else None


# -- model configuration --------------------------------------------------------

ATTENTION_VARIANTS = ("aca", "plain_softmax", "sigmoid", "softmax_one")

ABLATION_ROWS = "abcdefg"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the large-benchmark
    recipe; :func:`desk_config` shrinks them for synthetic desk-scale runs."""

    hidden: int = 256
    n_heads: int = 8
    d_feat: int = 64
    n_dummies: int = 45          # L_d
    pool_size: int = 10          # L_p
    top_k: int = 1               # K
    n_moment_queries: int = 10
    enc_layers: int = 3
    dec_layers: int = 3
    aca_layers: int = 2
    dummy_enc_layers: int = 2
    moment_enc_layers: int = 1
    sentence_enc_layers: int = 1
    attention_variant: str = "aca"
    dropout: float = 0.1
    # component toggles; rows (a)..(g) of the ablation map onto these
    use_cross_attention: bool = True
    use_dummies: bool = True
    use_dummy_encoder: bool = True
    use_dummy_losses: bool = True
    use_correlation: bool = True
    use_saliency_detector: bool = True
    # alternative normalizer for the distillation loss (|V+| instead of L_v)
    distill_normalize_by_positives: bool = False

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return cfg unchanged, or raise ConfigError listing every violation."""
    problems = []
    positive = [
        ("hidden", cfg.hidden), ("n_heads", cfg.n_heads), ("d_feat", cfg.d_feat),
        ("n_dummies", cfg.n_dummies), ("pool_size", cfg.pool_size), ("top_k", cfg.top_k),
        ("n_moment_queries", cfg.n_moment_queries),
    ]
    for name, value in positive:
        if value < 1:
            problems.append(f"{name} must be >= 1, got {value}")
    for name in ("enc_layers", "dec_layers", "aca_layers", "dummy_enc_layers",
                 "moment_enc_layers", "sentence_enc_layers"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name} must be >= 0")
    if cfg.hidden % cfg.n_heads != 0:
        problems.append(f"hidden {cfg.hidden} not divisible by n_heads {cfg.n_heads}")
    if cfg.top_k > cfg.pool_size:
        problems.append(f"top_k {cfg.top_k} exceeds pool_size {cfg.pool_size}")
    if cfg.attention_variant not in ATTENTION_VARIANTS:
        problems.append(f"unknown attention_variant {cfg.attention_variant!r}")
    if cfg.use_cross_attention and cfg.aca_layers < 1:
        problems.append("aca_layers must be >= 1 when cross-attention is enabled")
    if not (0.0 <= cfg.dropout < 1.0):
        problems.append(f"dropout {cfg.dropout} outside [0, 1)")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def ablation_config(row: str, base: ModelConfig | None = None) -> ModelConfig:
    """Map an ablation row letter (a..g) onto the component toggles.

    (a) self-attention fusion baseline, (b) + cross-attention,
    (c) + learnable extra keys, (d) + dummy encoder, (e) + dummy losses,
    (f) + correlation learner, (g) + moment-adaptive saliency detector.
    """
    row = row.strip().lower()
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {ABLATION_ROWS}")
    base = base or ModelConfig()
    idx = ABLATION_ROWS.index(row)
    cfg = base.replace(
        use_cross_attention=idx >= 1,
        use_dummies=idx >= 2,
        use_dummy_encoder=idx >= 3,
        use_dummy_losses=idx >= 4,
        use_correlation=idx >= 5,
        use_saliency_detector=idx >= 6,
        attention_variant="aca" if idx >= 2 else "plain_softmax",
    )
    return validate_config(cfg)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients and temperatures of the overall training objective."""

    hl: float = 1.0
    l1: float = 10.0
    giou: float = 1.0
    ce: float = 4.0
    ortho: float = 1.0
    align: float = 1.0
    distill: float = 1.0
    tau_align: float = 0.07
    tau_rank: float = 0.5
    margin: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
            if f.name in ("tau_align", "tau_rank"):
                if v <= 0:
                    raise ConfigError(f"{f.name} must be positive")
            elif v < 0:
                raise ConfigError(f"{f.name} must be nonnegative")

    def replace(self, **kw) -> "LossWeights":
        return replace(self, **kw)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration for synthetic desk-scale experiments."""
    cfg = ModelConfig(
        hidden=32, n_heads=4, d_feat=64, n_dummies=6, pool_size=6, top_k=2,
        n_moment_queries=10, enc_layers=2, dec_layers=2, aca_layers=2,
        dummy_enc_layers=1, moment_enc_layers=1, sentence_enc_layers=1,
        dropout=0.0,
    ).replace(**overrides)
    return validate_config(cfg)
