"""Clip-word correlation learner (training-time only).

A learnable moment token pooled with the positive / negative clips gives
visual prototypes; a learnable sentence token pooled with the words / encoded
dummies gives textual prototypes. A batch-contrastive loss aligns the
positive pair and pushes the dummy prototype to exclude moment content. From
the aligned space we read off a clip-word guidance map and distill it into
the cross-attention weights of positive clips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import EmptyInstance, ShapeError
from .nn import ParamBag, SelfAttentionBlock

LOG_EPS = 1e-9
RATIO_CAP = 1.0 - 1e-6


class PrototypePooler:
    """Self-attention block(s) that pool a learnable token with a token set;
    slot 0 of the output is the prototype, the rest are the projected set.
    No positional encodings, so pooling is permutation-invariant."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int,
                 n_layers: int, rng: np.random.Generator):
        self.blocks = [
            SelfAttentionBlock(bag, f"{name}.layer{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]

    def __call__(self, token: Tensor, items: Tensor,
                 drop: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        seq = ad.concat([ad.reshape(token, (1, -1)), items], axis=0)
        for block in self.blocks:
            seq = block(seq, drop, rng)
        return seq[0], seq[1:]


@dataclass
class PrototypeSet:
    """Per-instance prototypes and projected token sets. A side is None when
    the instance has no clips of that polarity."""

    moment_pos: Tensor | None      # pooled over positive clips
    moment_neg: Tensor | None      # pooled over negative clips
    sentence_pos: Tensor           # pooled over words
    sentence_neg: Tensor | None    # pooled over encoded dummies
    clips_pos: Tensor | None       # projected positive clips (|V+|, h)
    words_proj: Tensor             # projected words (L_q, h)
    dummies_proj: Tensor | None    # projected dummies (L_d, h)


def build_visual_prototypes(pooler: PrototypePooler, moment_token: Tensor,
                            fused_clips: Tensor, relevance: np.ndarray,
                            drop: float = 0.0, rng: np.random.Generator | None = None,
                            ) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    """Pool the moment token with positive clips and, separately, with
    negative clips. Returns (moment_pos, clips_pos, moment_neg); absent sides
    come back as None and are skipped by the alignment loss."""
    relevance = np.asarray(relevance)
    pos_idx = np.flatnonzero(relevance == 1)
    neg_idx = np.flatnonzero(relevance != 1)
    if pos_idx.size == 0 and neg_idx.size == 0:
        raise EmptyInstance("no clips at all")
    moment_pos = clips_pos = moment_neg = None
    if pos_idx.size:
        moment_pos, clips_pos = pooler(moment_token, fused_clips[pos_idx], drop, rng)
    if neg_idx.size:
        moment_neg, _ = pooler(moment_token, fused_clips[neg_idx], drop, rng)
    return moment_pos, clips_pos, moment_neg


def build_textual_prototypes(pooler: PrototypePooler, sentence_token: Tensor,
                             words: Tensor, encoded_dummies: Tensor | None,
                             drop: float = 0.0, rng: np.random.Generator | None = None,
                             ) -> tuple[Tensor, Tensor, Tensor | None, Tensor | None]:
    """Pool the sentence token with the words (positive side) and with the
    encoded dummies (negative side)."""
    sentence_pos, words_proj = pooler(sentence_token, words, drop, rng)
    sentence_neg = dummies_proj = None
    if encoded_dummies is not None and encoded_dummies.shape[0] > 0:
        sentence_neg, dummies_proj = pooler(sentence_token, encoded_dummies, drop, rng)
    return sentence_pos, words_proj, sentence_neg, dummies_proj


def loss_align(batch: list[PrototypeSet], tau: float) -> Tensor:
    """Batch-contrastive alignment over length-normalized prototypes.

    For each instance the positive term pulls its sentence prototype toward
    its own visual moment prototype against every moment / non-moment
    prototype in the batch; the negative term pushes the dummy prototype away
    from its own non-moment prototype. Absent prototypes drop out of both
    numerator and denominator.
    """
    cand_key: dict[tuple[int, str], int] = {}
    cand_list: list[Tensor] = []
    for b, ps in enumerate(batch):
        if ps.moment_pos is not None:
            cand_key[(b, "+")] = len(cand_list)
            cand_list.append(ps.moment_pos)
        if ps.moment_neg is not None:
            cand_key[(b, "-")] = len(cand_list)
            cand_list.append(ps.moment_neg)
    if not cand_list:
        return Tensor(0.0)

    anchors: list[Tensor] = []
    own_idx: list[int] = []
    n_pos = 0
    contributing: set[int] = set()
    for b, ps in enumerate(batch):  # positive terms first, then negative
        if ps.moment_pos is not None:
            anchors.append(ps.sentence_pos)
            own_idx.append(cand_key[(b, "+")])
            contributing.add(b)
            n_pos += 1
    for b, ps in enumerate(batch):
        if ps.sentence_neg is not None and ps.moment_neg is not None:
            anchors.append(ps.sentence_neg)
            own_idx.append(cand_key[(b, "-")])
            contributing.add(b)
    if not anchors:
        return Tensor(0.0)

    cand_mat = ad.l2_normalize(ad.stack(cand_list, axis=0), axis=-1)
    anchor_mat = ad.l2_normalize(ad.stack(anchors, axis=0), axis=-1)
    sims = ad.scaled_matmul(anchor_mat, ad.transpose(cand_mat), 1.0 / tau)
    lse = ad.logsumexp(sims, axis=-1)
    own = sims[np.arange(len(anchors)), np.asarray(own_idx)]

    total = Tensor(0.0)
    if n_pos:
        total = ad.tsum(ad.sub(lse[:n_pos], own[:n_pos]))
    if len(anchors) > n_pos:
        ratio = ad.exp(ad.sub(own[n_pos:], lse[n_pos:]))
        ratio = ad.minimum(ratio, RATIO_CAP)
        total = ad.add(total, ad.mul(ad.tsum(ad.log(ad.sub(1.0, ratio))), -1.0))
    return ad.mul(total, 1.0 / max(len(contributing), 1))


def guidance_map(clips_pos: Tensor, words_proj: Tensor,
                 dummies_proj: Tensor | None) -> np.ndarray:
    """Row-stochastic clip-word correlation over [words; dummies] for the
    positive clips, inferred in the aligned space. Detached from the graph:
    it is the distillation target, not a trained quantity."""
    targets = words_proj.data if dummies_proj is None \
        else np.concatenate([words_proj.data, dummies_proj.data], axis=0)
    logits = clips_pos.data @ targets.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def loss_distill(attention_map: Tensor, guidance: np.ndarray, relevance: np.ndarray,
                 normalize_by_positives: bool = False) -> Tensor:
    """KL(attention || guidance) accumulated over positive clips.

    The normalizer is the full clip count (matching the printed objective)
    unless ``normalize_by_positives`` selects |V+| instead. Zero when there
    are no positive clips.
    """
    relevance = np.asarray(relevance)
    n_clips = relevance.shape[0]
    pos_idx = np.flatnonzero(relevance == 1)
    if pos_idx.size == 0:
        return Tensor(0.0)
    if attention_map.shape[0] != n_clips:
        raise ShapeError(f"attention rows {attention_map.shape[0]} != clips {n_clips}")
    if guidance.shape != (pos_idx.size, attention_map.shape[1]):
        raise ShapeError(
            f"guidance {guidance.shape} vs expected {(pos_idx.size, attention_map.shape[1])}")
    rows = attention_map[pos_idx]
    log_ratio = ad.sub(ad.log(ad.maximum(rows, LOG_EPS)),
                       Tensor(np.log(np.maximum(guidance, LOG_EPS))))
    total = ad.tsum(ad.mul(rows, log_ratio))
    denom = pos_idx.size if normalize_by_positives else n_clips
    return ad.mul(total, 1.0 / denom)
