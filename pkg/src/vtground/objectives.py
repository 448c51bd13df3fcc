"""Highlight-detection losses, their application to the query correspondence,
negative-pair construction and the total training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import LossWeights


@dataclass(frozen=True)
class RankLevels:
    """Threshold sets over the positive saliency levels present in an
    instance: for each level r >= 1 that occurs, the positive set holds the
    clips at or above r and the negative set the rest."""

    levels: tuple[int, ...]
    pos_sets: tuple[np.ndarray, ...]
    neg_sets: tuple[np.ndarray, ...]

    @property
    def count(self) -> int:
        return len(self.levels)


def rank_levels(saliency: np.ndarray) -> RankLevels:
    saliency = np.asarray(saliency)
    present = sorted(int(v) for v in np.unique(saliency) if v >= 1)
    pos_sets, neg_sets = [], []
    for level in present:
        pos_sets.append(np.flatnonzero(saliency >= level))
        neg_sets.append(np.flatnonzero(saliency < level))
    return RankLevels(levels=tuple(present), pos_sets=tuple(pos_sets), neg_sets=tuple(neg_sets))


def sample_margin_pair(saliency: np.ndarray, rng: np.random.Generator) -> tuple[int, int] | None:
    """One uniformly random (high, low) clip pair with strictly higher
    saliency on the high side; None when the instance is constant."""
    saliency = np.asarray(saliency)
    distinct = np.unique(saliency)
    if distinct.size < 2:
        return None
    for _ in range(64):
        hi, lo = rng.integers(0, saliency.size, size=2)
        if saliency[hi] > saliency[lo]:
            return int(hi), int(lo)
    # tiny instances can dodge rejection sampling; fall back to enumeration
    pairs = [(int(i), int(j)) for i in range(saliency.size) for j in range(saliency.size)
             if saliency[i] > saliency[j]]
    return pairs[int(rng.integers(0, len(pairs)))]


def loss_margin(scores: Tensor, pair: tuple[int, int] | None, margin: float) -> Tensor:
    """Hinge on one sampled (high, low) pair: max(0, margin + s_low - s_high)."""
    if pair is None:
        return Tensor(0.0)
    hi, lo = pair
    return ad.maximum(ad.add(ad.sub(scores[lo], scores[hi]), margin), 0.0)


def loss_rank_contrastive(scores: Tensor, levels: RankLevels, tau: float) -> Tensor:
    """Per present level, a temperature-scaled log-ratio of positive-clip
    mass to total mass, summed over levels."""
    if levels.count == 0:
        return Tensor(0.0)
    scaled = ad.mul(scores, 1.0 / tau)
    total = Tensor(0.0)
    for pos_idx, neg_idx in zip(levels.pos_sets, levels.neg_sets):
        if neg_idx.size == 0:
            continue  # -log(1) contributes nothing
        lse_pos = ad.logsumexp(scaled[pos_idx], axis=0)
        lse_all = ad.logsumexp(scaled, axis=0)
        total = ad.add(total, ad.sub(lse_all, lse_pos))
    return total


def loss_negative_pair(neg_scores: Tensor | None) -> Tensor:
    """Suppression on scores produced with an unmatched query: mean of
    -log(1 - sigmoid(s)), i.e. mean softplus(s). The logistic squashing
    lives only inside this loss."""
    if neg_scores is None:
        return Tensor(0.0)
    return ad.tmean(ad.softplus(neg_scores))


def highlight_losses(scores: Tensor, saliency: np.ndarray,
                     pair: tuple[int, int] | None, neg_scores: Tensor | None,
                     weights: LossWeights) -> dict[str, Tensor]:
    """Margin + rank-contrastive + negative-pair bundle; used both for the
    saliency scores and, verbatim, for the query correspondence."""
    return {
        "margin": loss_margin(scores, pair, weights.margin),
        "rank": loss_rank_contrastive(scores, rank_levels(saliency), weights.tau_rank),
        "neg": loss_negative_pair(neg_scores),
    }


def negative_pair_indices(video_ids: list[str]) -> list[int | None]:
    """Partner index per instance: the next instance's query (cyclic shift),
    skipped when the batch has a single element or the partner shares the
    same source video."""
    n = len(video_ids)
    if n < 2:
        return [None] * n
    out: list[int | None] = []
    for b in range(n):
        partner = (b + 1) % n
        out.append(None if video_ids[partner] == video_ids[b] else partner)
    return out


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum: mr + hl * (hl + attn + bce) + ortho + align + distill."""
    zero = Tensor(0.0)
    hl_block = ad.add(ad.add(parts.get("hl", zero), parts.get("attn", zero)),
                      parts.get("bce", zero))
    total = ad.add(parts.get("mr", zero), ad.mul(hl_block, weights.hl))
    total = ad.add(total, ad.mul(parts.get("ortho", zero), weights.ortho))
    total = ad.add(total, ad.mul(parts.get("align", zero), weights.align))
    return ad.add(total, ad.mul(parts.get("distill", zero), weights.distill))
