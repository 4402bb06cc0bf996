"""Transcript-level cross-modal divergence scoring.

Compares two recognizer outputs (e.g. lip-reading vs. speech-to-text) with
an insert/delete-only edit distance normalized by the summed lengths, which
ranges from 0 (identical) to 1 (no common content). Substitutions are
deliberately excluded: with them the score could never reach 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

Transcript = Sequence[Hashable]

HISTOGRAM_BINS = 101


def tokenize(text: str, granularity: str = "char") -> Sequence[Hashable]:
    """Split a transcript string into comparison tokens."""
    if granularity == "char":
        return text
    if granularity == "word":
        return text.split()
    raise ValueError(f"unknown granularity: {granularity!r}")


def _lcs_length(a: Transcript, b: Transcript) -> int:
    """Longest common subsequence length, row-vectorized DP.

    Row recurrence: with candidates c[j] = max(prev[j], prev[j-1] + 1 if
    a_i == b_j), the in-row dependency dp[j] = max(c[j], dp[j-1]) is a
    running maximum, so each row is a handful of array ops.
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    b_arr = np.asarray(list(b))
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    cur = np.zeros(len(b) + 1, dtype=np.int64)
    for x in a:
        match = b_arr == x
        np.maximum(prev[1:], np.where(match, prev[:-1] + 1, 0), out=cur[1:])
        cur[0] = 0
        np.maximum.accumulate(cur, out=cur)
        prev, cur = cur, prev
    return int(prev[-1])


def edit_delta(a: Transcript, b: Transcript) -> int:
    """Insert/delete edit distance: ``len(a) + len(b) - 2 * LCS(a, b)``."""
    return len(a) + len(b) - 2 * _lcs_length(a, b)


def normalized_divergence(a: Transcript, b: Transcript) -> float:
    """Edit delta over summed lengths, in [0, 1]; two empty inputs score 0."""
    total = len(a) + len(b)
    if total == 0:
        return 0.0
    return edit_delta(a, b) / total


@dataclass(frozen=True)
class CorpusSummary:
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    histogram: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "min": self.min,
            "max": self.max,
            "histogram_bins": HISTOGRAM_BINS,
            "histogram": list(self.histogram),
        }


def corpus_summary(scores: Sequence[float]) -> CorpusSummary:
    """Distribution report over divergence scores in [0, 1]."""
    if len(scores) == 0:
        raise ValueError("corpus_summary needs at least one score")
    arr = np.asarray(scores, dtype=np.float64)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    hist, _ = np.histogram(arr, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75])
    return CorpusSummary(
        count=int(arr.size),
        mean=float(arr.mean()),
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        min=float(arr.min()),
        max=float(arr.max()),
        histogram=tuple(int(c) for c in hist),
    )


def read_transcript_pairs(path: str | Path) -> list[tuple[str, str]]:
    """Read transcript pairs from a tab-separated UTF-8 file, one per line."""
    pairs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}"
                )
            pairs.append((fields[0], fields[1]))
    return pairs


def score_transcript_pairs(
    pairs: Sequence[tuple[str, str]], granularity: str = "char"
) -> list[float]:
    return [
        normalized_divergence(tokenize(a, granularity), tokenize(b, granularity))
        for a, b in pairs
    ]


def cross_stream_divergence(
    visual: np.ndarray, audio: np.ndarray, n_symbols: int = 8
) -> float:
    """Divergence between two feature streams via quantized signatures.

    Both streams are projected onto their leading cross-covariance pair (the
    directions along which they co-vary most), the two 1-D traces are
    quantized into ``n_symbols`` shared quantile bins, and the resulting
    symbol sequences are scored with ``normalized_divergence``. Congruent
    streams map to near-identical sequences; frames whose content diverges
    land in different bins.
    """
    v = np.asarray(visual, dtype=np.float64)
    a = np.asarray(audio, dtype=np.float64)
    if v.ndim != 2 or a.ndim != 2 or v.shape[0] != a.shape[0]:
        raise ValueError("streams must be 2-D with matching frame counts")
    vc = v - v.mean(axis=0)
    ac = a - a.mean(axis=0)
    cross = vc.T @ ac / max(v.shape[0], 1)
    u, _, wt = np.linalg.svd(cross)
    x = vc @ u[:, 0]
    y = ac @ wt[0]
    x = x / max(x.std(), 1e-12)
    y = y / max(y.std(), 1e-12)
    pooled = np.concatenate([x, y])
    edges = np.quantile(pooled, np.linspace(0, 1, n_symbols + 1)[1:-1])
    sx = np.digitize(x, edges)
    sy = np.digitize(y, edges)
    return normalized_divergence(sx.tolist(), sy.tolist())
