"""Moment-adaptive saliency detection.

The saliency token combines the averaged video context with the top-K
candidates from a learnable pool, where candidate weights come from
similarity matching between de-contextualized clips and the pool, scaled by
each clip's query correspondence. Scores are the scaled dot product between
the encoded saliency token (pushed through the cross-attention query
projector -- the same parameter object) and encoded clips.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear


def context_token(fused_clips: Tensor) -> Tensor:
    """Arithmetic mean over clips: the video context."""
    return ad.tmean(fused_clips, axis=0)


def candidate_weights(fused_clips: Tensor, context: Tensor, pool: Tensor,
                      correspondence: Tensor) -> Tensor:
    """Per-candidate weight: correspondence-scaled softmax matching between
    de-contextualized clips and the pool. The weights sum to the total
    correspondence mass."""
    diffs = ad.sub(fused_clips, ad.reshape(context, (1, -1)))
    logits = ad.matmul(diffs, ad.transpose(pool))      # (L_v, L_p)
    probs = ad.softmax(logits, axis=-1)
    scaled = ad.mul(probs, ad.reshape(correspondence, (-1, 1)))
    return ad.tsum(scaled, axis=0)                     # (L_p,)


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest weights; ties break toward the lower index."""
    order = np.argsort(-np.asarray(weights), kind="stable")
    return np.sort(order[:k])


def build_saliency_token(context: Tensor, pool: Tensor, weights: Tensor, k: int,
                         frozen_indices: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Context plus the weight-scaled top-K pool candidates.

    Selection is hard: the chosen indices act as constants of the forward
    pass (straight-through), so non-selected candidates receive gradient only
    through the matching weights.
    """
    idx = frozen_indices if frozen_indices is not None else top_k_indices(weights.data, k)
    chosen = ad.mul(pool[idx], ad.reshape(weights[idx], (-1, 1)))
    return ad.add(context, ad.tsum(chosen, axis=0)), idx


def saliency_scores(encoded_seq: Tensor, query_proj: Linear, hidden: int) -> Tensor:
    """Scores from the encoded [token; clips] sequence: project the token
    with the shared cross-attention query projector and dot it against every
    encoded clip, scaled by 1/sqrt(h)."""
    token = encoded_seq[0]
    clips = encoded_seq[1:]
    projected = query_proj(ad.reshape(token, (1, -1)))
    scores = ad.matmul(clips, ad.reshape(projected, (-1, 1)))
    return ad.mul(ad.reshape(scores, (-1,)), 1.0 / np.sqrt(hidden))
