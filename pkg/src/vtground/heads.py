"""Set-prediction machinery: transformer encoder over [saliency token; clips],
decoder with learnable moment queries, span / foreground heads, 1-D
generalized IoU and the moment-retrieval loss with optimal matching.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .core import ConfigError, LossWeights, MomentSpan, span_cw_to_se
from .nn import (
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    ParamBag,
    SelfAttentionBlock,
    sinusoidal_positions,
)


class Encoder:
    """Pre-norm self-attention stack with sinusoidal clip positions; the
    leading token (saliency slot) gets a zero positional code. Zero layers
    mean identity."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int,
                 n_layers: int, rng: np.random.Generator):
        self.h = h
        self.blocks = [
            SelfAttentionBlock(bag, f"{name}.layer{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]
        self.final_ln = LayerNorm(bag, f"{name}.final_ln", h) if n_layers else None

    def __call__(self, seq: Tensor, positions: np.ndarray | None = None,
                 drop: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        if not self.blocks:
            return seq
        if positions is None:
            pos = np.zeros((seq.shape[0], self.h))
            pos[1:] = sinusoidal_positions(seq.shape[0] - 1, self.h)
            positions = pos
        out = ad.add(seq, Tensor(positions))
        for block in self.blocks:
            out = block(out, drop, rng)
        return self.final_ln(out)


@dataclass
class DecoderOutput:
    spans: Tensor       # (n_q, 2) -- (center, width) after logistic bounding
    fg_logits: Tensor   # (n_q,)

    @property
    def confidences(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.fg_logits.data))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


class Decoder:
    """Learnable moment queries refined by self-attention and cross-attention
    to the encoded clips (whose keys carry positional codes), then span /
    foreground heads through logistic bounding.

    Each query carries a learnable span anchor (a bias on the span logits)
    initialized to tile the video with centers (i + 0.5) / n_q at a third
    width, so queries own regions from the first matching step instead of
    collectively predicting the dataset-median span. With the anchors and the
    zero-initialized final layer both at zero, an untrained decoder predicts
    the centered half-width span (logistic of zero)."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int,
                 n_layers: int, n_queries: int, rng: np.random.Generator):
        self.h = h
        self.queries = bag.param(f"{name}.queries", rng.normal(0.0, 0.02, size=(n_queries, h)))
        anchors = np.stack([
            [_logit((i + 0.5) / n_queries), _logit(1.0 / 3.0)]
            for i in range(n_queries)
        ])
        self.span_anchor = bag.param(f"{name}.span_anchor", anchors)
        self.self_blocks = [
            SelfAttentionBlock(bag, f"{name}.self{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]
        self.cross_blocks = [
            CrossAttentionBlock(bag, f"{name}.cross{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]
        self.final_ln = LayerNorm(bag, f"{name}.final_ln", h) if n_layers else None
        self.span_hidden = Linear(bag, f"{name}.span_hidden", h, h, rng)
        self.span_hidden2 = Linear(bag, f"{name}.span_hidden2", h, h, rng)
        self.span_out = Linear(bag, f"{name}.span_out", h, 2, rng, zero_init=True)
        self.fg_head = Linear(bag, f"{name}.fg", h, 1, rng)
        # low-confidence prior: matching costs start near-uniform across
        # queries instead of being decided by head init luck
        self.fg_head.b.data = np.full(1, -2.0)

    def __call__(self, memory: Tensor, drop: float = 0.0,
                 rng: np.random.Generator | None = None) -> DecoderOutput:
        x = self.queries
        key_bias = sinusoidal_positions(memory.shape[0], self.h)
        for self_block, cross_block in zip(self.self_blocks, self.cross_blocks):
            x = self_block(x, drop, rng)
            x = cross_block(x, memory, drop, rng, key_bias=key_bias, bias_values=True)
        if self.final_ln is not None:
            x = self.final_ln(x)
        hidden = ad.gelu(self.span_hidden2(ad.gelu(self.span_hidden(x))))
        span_logits = ad.add(self.span_out(hidden), self.span_anchor)
        spans = ad.sigmoid(span_logits)
        fg = ad.reshape(self.fg_head(x), (-1,))
        return DecoderOutput(spans=spans, fg_logits=fg)


# -- interval arithmetic ----------------------------------------------------------


def _giou_interval(a_s: float, a_e: float, b_s: float, b_e: float) -> float:
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    hull = max(a_e, b_e) - min(a_s, b_s)
    iou = inter / union if union > 0 else 0.0
    return iou - (hull - union) / hull if hull > 0 else 0.0


def giou_1d(a: MomentSpan, b: MomentSpan) -> float:
    """Generalized IoU on [start, end] intervals: IoU minus the fraction of
    the enclosing hull not covered by the union. Range (-1, 1]."""
    return _giou_interval(*span_cw_to_se(a), *span_cw_to_se(b))


def iou_1d(a: MomentSpan, b: MomentSpan) -> float:
    a_s, a_e = span_cw_to_se(a)
    b_s, b_e = span_cw_to_se(b)
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union if union > 0 else 0.0


def giou_pairs(pred_cw: Tensor, gt_cw: np.ndarray) -> Tensor:
    """Differentiable gIoU for matched (center, width) rows."""
    eps = 1e-12  # positive widths keep union and hull bounded away from zero
    p_start = ad.sub(pred_cw[:, 0], ad.mul(pred_cw[:, 1], 0.5))
    p_end = ad.add(pred_cw[:, 0], ad.mul(pred_cw[:, 1], 0.5))
    g_start = Tensor(gt_cw[:, 0] - gt_cw[:, 1] / 2)
    g_end = Tensor(gt_cw[:, 0] + gt_cw[:, 1] / 2)
    inter = ad.maximum(ad.sub(ad.minimum(p_end, g_end), ad.maximum(p_start, g_start)), 0.0)
    union = ad.sub(ad.add(ad.sub(p_end, p_start), ad.sub(g_end, g_start)), inter)
    hull = ad.sub(ad.maximum(p_end, g_end), ad.minimum(p_start, g_start))
    iou = ad.div(inter, ad.add(union, eps))
    return ad.sub(iou, ad.div(ad.sub(hull, union), ad.add(hull, eps)))


# -- matching and loss -------------------------------------------------------------


def match_cost_matrix(pred_spans: np.ndarray, confidences: np.ndarray,
                      gt_spans: list[MomentSpan], weights: LossWeights) -> np.ndarray:
    n_q = pred_spans.shape[0]
    cost = np.zeros((n_q, len(gt_spans)))
    for j, gt in enumerate(gt_spans):
        gt_s, gt_e = span_cw_to_se(gt)
        for i in range(n_q):
            c, w = pred_spans[i]
            l1 = abs(c - gt.center) + abs(w - gt.width)
            giou = _giou_interval(max(c - w / 2, 0.0), min(c + w / 2, 1.0), gt_s, gt_e)
            cost[i, j] = (weights.l1 * l1
                          + weights.giou * (1.0 - giou)
                          + weights.ce * (1.0 - confidences[i]))
    return cost


def match(pred_spans: np.ndarray, confidences: np.ndarray,
          gt_spans: list[MomentSpan], weights: LossWeights) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment (query index, gt index) minimizing the
    matching cost: exhaustive search for up to 4 targets, Hungarian beyond."""
    n_q = pred_spans.shape[0]
    n_gt = len(gt_spans)
    if n_gt == 0:
        return []
    if n_gt > n_q:
        raise ConfigError(f"{n_gt} ground-truth spans exceed {n_q} moment queries")
    cost = match_cost_matrix(pred_spans, confidences, gt_spans, weights)
    if n_gt <= 4:
        best, best_perm = np.inf, None
        for perm in permutations(range(n_q), n_gt):
            total = sum(cost[q, j] for j, q in enumerate(perm))
            if total < best - 1e-12:
                best, best_perm = total, perm
        return [(q, j) for j, q in enumerate(best_perm)]
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda qc: qc[1])


def loss_mr(output: DecoderOutput, gt_spans: list[MomentSpan], weights: LossWeights,
            assignment: list[tuple[int, int]] | None = None,
            ) -> tuple[Tensor, list[tuple[int, int]]]:
    """Moment-retrieval loss under the (given or computed) assignment:
    weighted L1 on (center, width), 1 - gIoU, and foreground / background
    cross-entropy over every query."""
    if assignment is None:
        assignment = match(output.spans.data, output.confidences, gt_spans, weights)
    n_q = output.spans.shape[0]

    fg_target = np.zeros(n_q)
    for q, _ in assignment:
        fg_target[q] = 1.0
    # binary CE with logits: softplus(x) - target * x, mean over queries
    ce = ad.tmean(ad.sub(ad.softplus(output.fg_logits),
                         ad.mul(Tensor(fg_target), output.fg_logits)))
    total = ad.mul(ce, weights.ce)

    if assignment:
        q_idx = np.array([q for q, _ in assignment])
        gt_cw = np.array([[gt_spans[j].center, gt_spans[j].width] for _, j in assignment])
        matched = output.spans[q_idx]
        l1 = ad.tmean(ad.tsum(ad.absolute(ad.sub(matched, Tensor(gt_cw))), axis=-1))
        giou = ad.tmean(ad.sub(1.0, giou_pairs(matched, gt_cw)))
        total = ad.add(total, ad.add(ad.mul(l1, weights.l1), ad.mul(giou, weights.giou)))
    return total, assignment


def decoder_prediction(output: DecoderOutput) -> list[tuple[MomentSpan, float]]:
    """Ranked (span, confidence) candidates from raw decoder output, with
    spans clamped into the valid normalized range."""
    confs = output.confidences
    spans = []
    for i in np.argsort(-confs, kind="stable"):
        c, w = output.spans.data[i]
        w = float(min(max(w, 1e-6), 1.0))
        c = float(np.clip(c, w / 2, 1.0 - w / 2))
        spans.append((MomentSpan(center=c, width=w), float(confs[i])))
    return spans
