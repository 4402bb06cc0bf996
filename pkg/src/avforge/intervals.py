"""1-D interval algebra for temporal forgery segments.

Intervals are half-open ``[onset, offset)`` in frame units, tagged with the
modality they belong to. This module covers the geometry (IoU and the
center-distance penalty used by the localization loss), the conversion
between interval sets and per-frame regression targets, frame-level
decoding back to intervals, and greedy proposal merging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

VISUAL = "visual"
AUDIO = "audio"
MODALITIES = (VISUAL, AUDIO)


@dataclass(frozen=True)
class Interval:
    """A half-open fake segment [onset, offset) in frames."""

    onset: float
    offset: float
    modality: str = VISUAL

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality: {self.modality!r}")
        if not (self.onset >= 0):
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if not (self.offset > self.onset):
            raise ValueError(
                f"offset must exceed onset, got [{self.onset}, {self.offset})"
            )

    @property
    def length(self) -> float:
        return self.offset - self.onset

    @property
    def center(self) -> float:
        return 0.5 * (self.onset + self.offset)


@dataclass(frozen=True)
class FrameTarget:
    """Per-frame localization target: fake flag plus boundary distances.

    On fake frames ``d_s = j - onset >= 0`` and ``d_e = j - offset <= 0``.
    Real frames carry (0, 0, 0); the training loss masks them out.
    """

    a: int
    d_s: float
    d_e: float

    def __post_init__(self):
        if self.a not in (0, 1):
            raise ValueError("fake flag must be 0 or 1")
        if self.a == 1 and not (self.d_s >= 0 and self.d_e <= 0):
            raise ValueError("fake frame requires d_s >= 0 and d_e <= 0")


@dataclass(frozen=True)
class Proposal:
    """A scored candidate fake interval."""

    interval: Interval
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


class FrameTargets:
    """Dense per-frame targets for one modality (struct-of-arrays)."""

    __slots__ = ("a", "d_s", "d_e")

    def __init__(self, a: np.ndarray, d_s: np.ndarray, d_e: np.ndarray):
        self.a = a
        self.d_s = d_s
        self.d_e = d_e

    def __len__(self) -> int:
        return self.a.shape[0]

    def __getitem__(self, j: int) -> FrameTarget:
        return FrameTarget(int(self.a[j]), float(self.d_s[j]), float(self.d_e[j]))


def iou_1d(a: Interval, b: Interval) -> float:
    """Intersection over union of two intervals; 0 when disjoint."""
    inter = min(a.offset, b.offset) - max(a.onset, b.onset)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def diou_penalty(a: Interval, b: Interval) -> float:
    """Squared center distance over squared enclosing length.

    Zero iff the centers coincide; at most 1 because both centers lie
    inside the smallest enclosing interval.
    """
    enclosing = max(a.offset, b.offset) - min(a.onset, b.onset)
    d = a.center - b.center
    return (d * d) / (enclosing * enclosing)


def _check_disjoint(intervals: Sequence[Interval], f: float) -> None:
    for iv in intervals:
        if iv.offset > f:
            raise ValueError(f"interval {iv} extends beyond frame count {f}")
    ordered = sorted(intervals, key=lambda iv: iv.onset)
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.onset < prev.offset:
            raise ValueError(f"overlapping intervals: {prev} and {nxt}")


def encode_frame_targets(
    intervals: Iterable[Interval], f: int
) -> dict[str, FrameTargets]:
    """Encode interval sets into per-frame targets for both modalities.

    Frame ``j`` lying inside ``[s, e)`` gets ``(1, j - s, j - e)``; all other
    frames get the inert ``(0, 0, 0)``. Intervals of one modality must be
    non-overlapping and contained in ``[0, f]``.
    """
    if f <= 0:
        raise ValueError("frame count must be positive")
    by_modality: dict[str, list[Interval]] = {m: [] for m in MODALITIES}
    for iv in intervals:
        by_modality[iv.modality].append(iv)

    out: dict[str, FrameTargets] = {}
    frames = np.arange(f, dtype=np.float64)
    for m, ivs in by_modality.items():
        _check_disjoint(ivs, f)
        a = np.zeros(f, dtype=np.int8)
        d_s = np.zeros(f, dtype=np.float64)
        d_e = np.zeros(f, dtype=np.float64)
        for iv in ivs:
            inside = (frames >= iv.onset) & (frames < iv.offset)
            a[inside] = 1
            d_s[inside] = frames[inside] - iv.onset
            d_e[inside] = frames[inside] - iv.offset
        out[m] = FrameTargets(a, d_s, d_e)
    return out


def decode_frame(
    j: int,
    a_hat: float,
    d_s_hat: float,
    d_e_hat: float,
    threshold: float = 0.5,
    modality: str = VISUAL,
) -> Interval | None:
    """Invert the frame encoding: ``[j - d_s_hat, j - d_e_hat)`` if confident.

    Returns None when ``a_hat`` does not exceed the threshold or when the
    decoded interval is degenerate (onset >= offset). Decoded onsets are
    clamped at 0 so the result stays a valid frame interval.
    """
    if not (0.0 <= a_hat <= 1.0):
        raise ValueError(f"a_hat must be a probability, got {a_hat}")
    if a_hat <= threshold:
        return None
    onset = j - d_s_hat
    offset = j - d_e_hat
    if onset >= offset:
        return None
    return Interval(max(onset, 0.0), offset, modality)


def merge_proposals(
    frame_proposals: Sequence[Proposal], iou_threshold: float = 0.5
) -> list[Proposal]:
    """Greedy non-maximum suppression over scored intervals.

    Proposals are visited in order of decreasing confidence (ties keep input
    order); one is kept iff its IoU with every already-kept proposal is below
    ``iou_threshold``. Output is sorted by confidence descending.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError("iou_threshold must be in (0, 1]")
    if not frame_proposals:
        return []
    conf = np.array([p.confidence for p in frame_proposals])
    order = np.argsort(-conf, kind="stable")
    kept: list[Proposal] = []
    for idx in order:
        cand = frame_proposals[idx]
        if all(iou_1d(cand.interval, k.interval) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def union_intervals(intervals: Iterable[Interval], modality: str = VISUAL) -> list[Interval]:
    """Merge overlapping intervals into their union, ignoring modality tags.

    Touching half-open intervals ([a,b) and [b,c)) stay separate. The merged
    intervals are re-tagged with ``modality``.
    """
    ordered = sorted(intervals, key=lambda iv: (iv.onset, iv.offset))
    merged: list[list[float]] = []
    for iv in ordered:
        if merged and iv.onset < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], iv.offset)
        else:
            merged.append([iv.onset, iv.offset])
    return [Interval(s, e, modality) for s, e in merged]
