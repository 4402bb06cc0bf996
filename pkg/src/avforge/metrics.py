"""Evaluation metrics for localization and detection.

Localization uses AP at a fixed IoU threshold with proposals pooled over
all records (greedy confidence-ordered matching, all-point interpolated
precision envelope) and AR at a proposal budget averaged over the IoU grid
0.5:0.05:0.95. Detection uses rank-based ROC AUC, average precision, and
thresholded accuracy. Metrics are rank-based throughout, so any strictly
monotone rescoring leaves them unchanged. Undefined cases (no ground truth,
single-class labels) return None rather than a made-up number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .intervals import (
    AUDIO,
    VISUAL,
    Interval,
    Proposal,
    iou_1d,
    merge_proposals,
    union_intervals,
)

AR_IOU_GRID = tuple(np.arange(0.5, 0.951, 0.05).round(2))


@dataclass(frozen=True)
class EvalRecord:
    """Per-sample evaluation payload; proposals ordered by confidence."""

    id: str
    proposals: tuple[Proposal, ...]
    gt_intervals: tuple[Interval, ...]
    video_score: float = 0.0
    video_label: int = 0

    def __post_init__(self):
        conf = [p.confidence for p in self.proposals]
        if any(a < b for a, b in zip(conf, conf[1:])):
            ordered = sorted(
                self.proposals, key=lambda p: -p.confidence
            )
            object.__setattr__(self, "proposals", tuple(ordered))

    def for_modality(self, modality: str) -> "EvalRecord":
        return replace(
            self,
            proposals=tuple(p for p in self.proposals if p.interval.modality == modality),
            gt_intervals=tuple(iv for iv in self.gt_intervals if iv.modality == modality),
        )

    def joint(self, nms_iou: float = 0.5) -> "EvalRecord":
        """Cross-modality view: GT segments are unioned, proposals pooled.

        Pooled proposals go through one more suppression round so that the
        visual and audio copies of the same detected segment count once.
        Unioning proposals instead chains overlapping false positives into
        blobs that span several ground-truth segments, which wrecks the
        matching, so suppression is deliberately the merger here too.
        """
        return replace(
            self,
            proposals=tuple(merge_proposals(list(self.proposals), nms_iou)),
            gt_intervals=tuple(union_intervals(self.gt_intervals)),
        )


def _greedy_match_flags(
    proposals: Sequence[Proposal],
    gts: Sequence[Interval],
    threshold: float,
) -> list[int]:
    """Confidence-ordered one-to-one matching; ties pick the highest IoU."""
    matched = [False] * len(gts)
    flags = []
    for prop in proposals:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            iou = iou_1d(prop.interval, gt)
            if iou >= threshold and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            matched[best] = True
            flags.append(1)
        else:
            flags.append(0)
    return flags


def _envelope_area(tp_flags: np.ndarray, total_gt: int) -> float:
    """All-point interpolated area under the precision envelope."""
    tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp / ranks
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    hits = np.flatnonzero(np.asarray(tp_flags) == 1)
    return float(envelope[hits].sum() / total_gt)


def ap_at_iou(records: Sequence[EvalRecord], p: float) -> float | None:
    """Average precision at IoU threshold ``p`` over globally pooled proposals.

    Returns None when no record carries ground truth (not applicable).
    """
    if not (0.0 < p <= 1.0):
        raise ValueError("IoU threshold must be in (0, 1]")
    total_gt = sum(len(r.gt_intervals) for r in records)
    if total_gt == 0:
        return None
    pool = [
        (prop.confidence, ri, prop)
        for ri, rec in enumerate(records)
        for prop in rec.proposals
    ]
    if not pool:
        return 0.0
    conf = np.array([c for c, _, _ in pool])
    order = np.argsort(-conf, kind="stable")
    matched = {ri: [False] * len(r.gt_intervals) for ri, r in enumerate(records)}
    flags = np.zeros(len(pool), dtype=np.int64)
    for rank, oi in enumerate(order):
        _, ri, prop = pool[oi]
        gts = records[ri].gt_intervals
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if matched[ri][g]:
                continue
            iou = iou_1d(prop.interval, gt)
            if iou >= p and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            matched[ri][best] = True
            flags[rank] = 1
    return _envelope_area(flags, total_gt)


def ar_at_n(records: Sequence[EvalRecord], n: int) -> float | None:
    """Average recall with at most ``n`` proposals per record.

    Recall is averaged over the IoU grid {0.5, 0.55, ..., 0.95}, then over
    the records that have ground truth. None when no record has any.
    """
    if n < 1:
        raise ValueError("proposal budget must be >= 1")
    per_record = []
    for rec in records:
        if not rec.gt_intervals:
            continue
        top = sorted(rec.proposals, key=lambda pr: -pr.confidence)[:n]
        recalls = []
        for t in AR_IOU_GRID:
            flags = _greedy_match_flags(top, rec.gt_intervals, t)
            recalls.append(sum(flags) / len(rec.gt_intervals))
        per_record.append(float(np.mean(recalls)))
    if not per_record:
        return None
    return float(np.mean(per_record))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Probability that a random positive outranks a random negative.

    Rank formulation with ties counted half; None for single-class input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = 0.5 * (rank_pos + rank_pos + (j - i))
        ranks[order[i : j + 1]] = avg
        rank_pos += j - i + 1
        i = j + 1
    pos_ranks = ranks[labels == 1].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_ap(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Average precision (interpolated envelope) over the score ranking."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    return _envelope_area(labels[order], n_pos)


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """Fraction of correct fake/real calls at a fixed threshold (fake iff >)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        raise ValueError("accuracy needs at least one score")
    pred = (scores > threshold).astype(np.int64)
    return float((pred == labels).mean())


# -- report assembly ---------------------------------------------------------

TFL_AP_POINTS = (0.5, 0.75, 0.95)
TFL_AR_POINTS = (100, 50, 20, 10)
CHECKPOINT_AP_POINTS = (0.5, 0.75, 0.95)
CHECKPOINT_AR_POINTS = (50, 20, 10)


def tfl_report(records: Sequence[EvalRecord], joint: bool = True) -> dict:
    """AP/AR table per modality plus the joint view (the headline numbers)."""
    views: dict[str, list[EvalRecord]] = {
        VISUAL: [r.for_modality(VISUAL) for r in records],
        AUDIO: [r.for_modality(AUDIO) for r in records],
    }
    if joint:
        views["joint"] = [r.joint() for r in records]
    out: dict = {}
    for name, recs in views.items():
        entry: dict = {}
        for pt in TFL_AP_POINTS:
            entry[f"ap@{pt}"] = ap_at_iou(recs, pt)
        for budget in TFL_AR_POINTS:
            entry[f"ar@{budget}"] = ar_at_n(recs, budget)
        out[name] = entry
    return out


def tfl_checkpoint_metric(records: Sequence[EvalRecord]) -> float:
    """Checkpoint selector: summed joint AP and AR over the fixed point sets."""
    joint = [r.joint() for r in records]
    total = 0.0
    for pt in CHECKPOINT_AP_POINTS:
        total += ap_at_iou(joint, pt) or 0.0
    for budget in CHECKPOINT_AR_POINTS:
        total += ar_at_n(joint, budget) or 0.0
    return total


def dfd_report(records: Sequence[EvalRecord]) -> dict:
    scores = [r.video_score for r in records]
    labels = [r.video_label for r in records]
    return {
        "auc": roc_auc(scores, labels),
        "ap": binary_ap(scores, labels),
        "acc": accuracy(scores, labels),
    }


# -- prediction files --------------------------------------------------------


def write_predictions(records: Iterable[EvalRecord], path: str | Path) -> None:
    """One JSON record per line: id, video_score, (modality, onset, offset, conf)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "video_score": rec.video_score,
                        "proposals": [
                            [p.interval.modality, p.interval.onset,
                             p.interval.offset, p.confidence]
                            for p in rec.proposals
                        ],
                    }
                )
                + "\n"
            )


def read_predictions(path: str | Path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["id"]] = rec
    return out


def records_from_files(pred_path: str | Path, manifest_path: str | Path) -> list[EvalRecord]:
    """Join a prediction dump against a dataset manifest into EvalRecords."""
    preds = read_predictions(pred_path)
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            man = json.loads(line)
            pred = preds.get(man["id"], {"video_score": 0.0, "proposals": []})
            gt = tuple(
                Interval(onset, offset, modality)
                for modality, onset, offset in man.get("intervals", [])
            )
            props = tuple(
                Proposal(Interval(s, e, m), c)
                for m, s, e, c in pred["proposals"]
            )
            records.append(
                EvalRecord(
                    id=man["id"],
                    proposals=props,
                    gt_intervals=gt,
                    video_score=float(pred["video_score"]),
                    video_label=int(man["label_visual"] or man["label_audio"]),
                )
            )
    return records
