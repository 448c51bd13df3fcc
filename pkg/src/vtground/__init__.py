"""Desk-scale video temporal grounding with correlation-guided attention.

A numpy library implementing joint moment retrieval and highlight detection:
adaptive cross-attention with dummy tokens, a clip-word correlation learner
distilled into the attention map, and a moment-adaptive saliency detector,
trained end to end on synthetic feature-level data.
"""

from .core import (
    ABLATION_ROWS,
    ATTENTION_VARIANTS,
    ConfigError,
    FeatureSequence,
    GroundTruth,
    InvalidSpan,
    LossWeights,
    ModelConfig,
    MomentSpan,
    NumericsError,
    ParseError,
    Prediction,
    RangeError,
    ShapeError,
    ablation_config,
    desk_config,
    span_cw_to_se,
    span_se_to_cw,
    validate_config,
)
from .data import (
    DatasetRecord,
    SynthSpec,
    dataset_fingerprint,
    generate_synthetic,
    load_jsonl,
    load_predictions,
    save_dataset,
    save_predictions,
)
from .evalkit import (
    AlignmentAnalysis,
    MetricReport,
    compute_report,
    correspondence_alignment_analysis,
    evaluate_dataset,
)
from .pipeline import (
    GroundingModel,
    TrainConfig,
    TrainState,
    batch_losses,
    gradient_check,
    init_state,
    load_checkpoint,
    predict_dataset,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS", "ATTENTION_VARIANTS", "AlignmentAnalysis", "ConfigError",
    "DatasetRecord", "FeatureSequence", "GroundTruth", "GroundingModel",
    "InvalidSpan", "LossWeights", "MetricReport", "ModelConfig", "MomentSpan",
    "NumericsError", "ParseError", "Prediction", "RangeError", "ShapeError",
    "SynthSpec", "TrainConfig", "TrainState", "ablation_config", "batch_losses",
    "compute_report", "correspondence_alignment_analysis", "dataset_fingerprint",
    "desk_config", "evaluate_dataset", "generate_synthetic", "gradient_check",
    "init_state", "load_checkpoint", "load_jsonl", "load_predictions",
    "predict_dataset", "save_checkpoint", "save_dataset", "save_predictions",
    "span_cw_to_se", "span_se_to_cw", "train", "validate_config",
]
