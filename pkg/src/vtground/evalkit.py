"""Evaluation metrics for moment retrieval and highlight detection, plus the
correspondence-alignment analysis (per-query cosine between correspondence
and ground-truth saliency, binned against retrieval quality).

All IoU comparisons use >= threshold. Detection AP matches each prediction,
in confidence order, to at most one unconsumed ground-truth span.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GroundTruth, MomentSpan, Prediction
from .heads import iou_1d

MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
R1_THRESHOLDS = (0.3, 0.5, 0.7)
DEFAULT_POSITIVE_LEVEL = 4


@dataclass
class MetricReport:
    r1: dict[float, float]
    map_at: dict[float, float]
    map_avg: float
    miou: float
    hd_map: float
    hit1: float
    n_queries: int
    per_query: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "r1": {str(k): v for k, v in self.r1.items()},
            "map": {str(k): v for k, v in self.map_at.items()},
            "map_avg": self.map_avg,
            "miou": self.miou,
            "hd_map": self.hd_map,
            "hit1": self.hit1,
            "n_queries": self.n_queries,
            "per_query": self.per_query,
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


# -- moment retrieval ----------------------------------------------------------


def recall_at_1(preds: list[Prediction], gts: list[GroundTruth], threshold: float) -> float:
    """Fraction of queries whose top-confidence span overlaps any GT span
    with IoU >= threshold. Queries without predictions count as misses."""
    hits = 0
    for pred, gt in zip(preds, gts):
        top = pred.top1
        if top is None:
            continue
        if any(iou_1d(top, g) >= threshold for g in gt.spans):
            hits += 1
    return hits / len(preds) if preds else 0.0


def average_precision(ranked: list[MomentSpan], gt_spans: list[MomentSpan],
                      threshold: float) -> float:
    """Detection AP for one query: walk predictions in rank order, greedily
    matching each to its best unconsumed GT at IoU >= threshold; AP is the
    precision accumulated at each true positive over the GT count."""
    if not gt_spans:
        return 0.0
    consumed = [False] * len(gt_spans)
    ap = 0.0
    tp = 0
    for rank, span in enumerate(ranked, start=1):
        best_j, best_iou = -1, threshold
        for j, g in enumerate(gt_spans):
            if consumed[j]:
                continue
            iou = iou_1d(span, g)
            if iou >= best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            consumed[best_j] = True
            tp += 1
            ap += tp / rank
    return ap / len(gt_spans)


def map_moments(preds: list[Prediction], gts: list[GroundTruth],
                thresholds: tuple[float, ...] = MAP_THRESHOLDS,
                ) -> tuple[dict[float, float], float, list[float]]:
    """Per-threshold mAP (mean over queries) plus the threshold average and
    every query's own threshold-averaged AP (used by the alignment analysis)."""
    per_threshold: dict[float, float] = {}
    per_query_avg = np.zeros(len(preds))
    for t in thresholds:
        aps = [average_precision([s for s, _ in p.spans], list(g.spans), t)
               for p, g in zip(preds, gts)]
        per_threshold[float(t)] = float(np.mean(aps)) if aps else 0.0
        per_query_avg += np.asarray(aps) if aps else 0.0
    per_query_avg /= max(len(thresholds), 1)
    map_avg = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return per_threshold, map_avg, per_query_avg.tolist()


def mean_iou(preds: list[Prediction], gts: list[GroundTruth]) -> float:
    """Mean over queries of the best IoU between the top-1 prediction and any
    GT span; missing predictions contribute zero."""
    vals = []
    for pred, gt in zip(preds, gts):
        top = pred.top1
        vals.append(max((iou_1d(top, g) for g in gt.spans), default=0.0) if top else 0.0)
    return float(np.mean(vals)) if vals else 0.0


# -- highlight detection -----------------------------------------------------------


def _ranking_ap(scores: np.ndarray, positives: np.ndarray) -> float:
    """Binary AP of a score ranking: mean precision at each positive's rank."""
    order = np.argsort(-scores, kind="stable")
    labels = positives[order]
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    ranks = np.arange(1, labels.size + 1)
    precision = np.cumsum(labels) / ranks
    return float(precision[labels.astype(bool)].sum() / n_pos)


def hd_metrics(preds: list[Prediction], gts: list[GroundTruth],
               positive_level: int = DEFAULT_POSITIVE_LEVEL) -> tuple[float, float]:
    """(hd_map, hit1) with positives = clips at GT saliency >= positive_level.
    Queries without a positive clip are excluded from both metrics."""
    aps, hits = [], []
    for pred, gt in zip(preds, gts):
        positives = (gt.saliency >= positive_level).astype(np.float64)
        if positives.sum() == 0:
            continue
        scores = np.asarray(pred.saliency, dtype=np.float64)
        aps.append(_ranking_ap(scores, positives))
        hits.append(float(positives[int(np.argmax(scores))] > 0))
    if not aps:
        return 0.0, 0.0
    return float(np.mean(aps)), float(np.mean(hits))


# -- assembled report ------------------------------------------------------------------


def compute_report(preds: list[Prediction], gts: list[GroundTruth],
                   query_ids: list[str] | None = None,
                   positive_level: int = DEFAULT_POSITIVE_LEVEL) -> MetricReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    r1 = {t: recall_at_1(preds, gts, t) for t in R1_THRESHOLDS}
    per_threshold, map_avg, per_query_avg = map_moments(preds, gts)
    hd_map, hit1 = hd_metrics(preds, gts, positive_level)
    per_query = []
    for i, avg in enumerate(per_query_avg):
        per_query.append({
            "qid": query_ids[i] if query_ids else str(i),
            "avg_map": avg,
        })
    return MetricReport(
        r1=r1,
        map_at={0.5: per_threshold[0.5], 0.75: per_threshold[0.75]},
        map_avg=map_avg,
        miou=mean_iou(preds, gts),
        hd_map=hd_map,
        hit1=hit1,
        n_queries=len(preds),
        per_query=per_query,
    )


def evaluate_dataset(model, records, positive_level: int = DEFAULT_POSITIVE_LEVEL) -> MetricReport:
    """Run inference over records and score it. Import-light so the trainer
    can call it mid-run."""
    from .pipeline import predict_dataset

    triples = predict_dataset(model, records)
    preds = [p for _, p, _ in triples]
    gts = [rec.gt for rec, _, _ in triples]
    qids = [rec.features.query_id for rec, _, _ in triples]
    return compute_report(preds, gts, qids, positive_level)


# -- correspondence-alignment analysis ---------------------------------------------------


@dataclass
class AlignmentBin:
    low: float
    high: float
    count: int
    mean_map: float


@dataclass
class AlignmentAnalysis:
    bins: list[AlignmentBin]
    skipped: int

    def occupied(self) -> list[AlignmentBin]:
        return [b for b in self.bins if b.count > 0]

    def save_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_low", "bin_high", "count", "mean_map"])
            for b in self.bins:
                writer.writerow([f"{b.low:.6f}", f"{b.high:.6f}", b.count, f"{b.mean_map:.6f}"])


def correspondence_alignment_analysis(correspondences: list[np.ndarray | None],
                                      saliencies: list[np.ndarray],
                                      per_query_map: list[float],
                                      n_bins: int = 10) -> AlignmentAnalysis:
    """Cosine similarity between the clip-wise correspondence and the GT
    saliency per query, binned into equal-width bins over the observed range;
    each bin reports its population and mean per-query averaged mAP. Queries
    with a zero-norm side are skipped and counted."""
    cosines, maps = [], []
    skipped = 0
    for corr, sal, avg_map in zip(correspondences, saliencies, per_query_map):
        if corr is None:
            skipped += 1
            continue
        sal = np.asarray(sal, dtype=np.float64)
        cn, sn = np.linalg.norm(corr), np.linalg.norm(sal)
        if cn == 0.0 or sn == 0.0:
            skipped += 1
            continue
        cosines.append(float(np.dot(corr, sal) / (cn * sn)))
        maps.append(avg_map)
    if not cosines:
        return AlignmentAnalysis(bins=[], skipped=skipped)
    lo, hi = min(cosines), max(cosines)
    if hi - lo < 1e-12:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    bins = []
    cosines_arr = np.asarray(cosines)
    maps_arr = np.asarray(maps)
    for i in range(n_bins):
        if i < n_bins - 1:
            mask = (cosines_arr >= edges[i]) & (cosines_arr < edges[i + 1])
        else:
            mask = (cosines_arr >= edges[i]) & (cosines_arr <= edges[i + 1])
        count = int(mask.sum())
        mean_map = float(maps_arr[mask].mean()) if count else 0.0
        bins.append(AlignmentBin(low=float(edges[i]), high=float(edges[i + 1]),
                                 count=count, mean_map=mean_map))
    return AlignmentAnalysis(bins=bins, skipped=skipped)
