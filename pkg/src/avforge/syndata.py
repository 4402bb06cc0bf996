"""Deterministic synthetic congruent/divergent feature streams.

Stands in for the speech-recognition feature backbones: one smooth latent
walk drives both the visual and the audio stream through fixed random
linear maps, so in real samples the two streams carry the same content.
Fake samples replace the latent of one (or both) modalities inside sampled
intervals with an independent walk, producing exactly the cross-modal
information divergence the detector is meant to find.

Datasets are written as a ``manifest.jsonl`` plus one little-endian binary
blob per sample, bit-exact on round-trip.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .intervals import AUDIO, VISUAL, Interval

MAGIC = b"DMDF"
BLOB_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

WALK_KEEP = 0.95
WALK_DRIVE = 0.05
MIN_INTERVAL_GAP = 4

_MODE_VISUAL = "visual"
_MODE_AUDIO = "audio"
_MODE_BOTH = "both"


class DatasetFormatError(ValueError):
    """Base class for dataset parse failures."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedBlobError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    f: int = 120
    d0: int = 16
    latent_dim: int = 8
    noise_sigma: float = 0.1
    p_fake: float = 0.5
    min_len: int = 8
    max_len: int = 30
    max_intervals: int = 2
    modality_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.min_len <= self.max_len < self.f):
            raise ValueError("need 0 < min_len <= max_len < f")
        if not (0.0 <= self.p_fake <= 1.0):
            raise ValueError("p_fake must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.max_intervals < 1:
            raise ValueError("max_intervals must be >= 1")
        if self.d0 < 1 or self.latent_dim < 1:
            raise ValueError("dimensions must be positive")
        mix = self.modality_mix
        if len(mix) != 3 or any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("modality_mix must be 3 probabilities summing to 1")
        # worst case: max_intervals of max_len fit with the enforced gaps
        needed = self.max_intervals * self.max_len + (self.max_intervals - 1) * MIN_INTERVAL_GAP
        if needed > self.f:
            raise ValueError(
                f"cannot pack {self.max_intervals} intervals of up to "
                f"{self.max_len} frames into {self.f}"
            )


@dataclass(frozen=True)
class Sample:
    """One paired feature recording with its forgery annotations."""

    id: str
    visual: np.ndarray
    audio: np.ndarray
    label_visual: int
    label_audio: int
    intervals: tuple[Interval, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.visual.ndim != 2 or self.visual.shape != self.audio.shape:
            raise ValueError("visual and audio must be matrices of equal shape")
        has_v = any(iv.modality == VISUAL for iv in self.intervals)
        has_a = any(iv.modality == AUDIO for iv in self.intervals)
        if (self.label_visual == 1) != has_v or (self.label_audio == 1) != has_a:
            raise ValueError("labels must match interval modalities")

    @property
    def f(self) -> int:
        return self.visual.shape[0]

    @property
    def d0(self) -> int:
        return self.visual.shape[1]

    @property
    def labels(self) -> tuple[int, int]:
        return (self.label_visual, self.label_audio)

    @property
    def is_fake(self) -> bool:
        return bool(self.label_visual or self.label_audio)


def _mixing_maps(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA]))
    a_v = rng.normal(size=(cfg.latent_dim, cfg.d0))
    a_a = rng.normal(size=(cfg.latent_dim, cfg.d0))
    return a_v, a_a


def _latent_walk(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # stationary AR(1): keep 0.95 of the state, drive with 0.05 * N(0, 1)
    std0 = WALK_DRIVE / np.sqrt(1.0 - WALK_KEEP**2)
    walk = np.empty((n, k))
    walk[0] = rng.normal(size=k) * std0
    noise = rng.normal(size=(n - 1, k)) if n > 1 else np.empty((0, k))
    for t in range(1, n):
        walk[t] = WALK_KEEP * walk[t - 1] + WALK_DRIVE * noise[t - 1]
    return walk


def _place_intervals(
    rng: np.random.Generator, cfg: SyntheticConfig, count: int
) -> list[tuple[int, int]]:
    """Sample ``count`` disjoint [onset, offset) spans, gap >= MIN_INTERVAL_GAP.

    Onsets come from a sorted uniform composition of the leftover frames, so
    every feasible placement is reachable and the draw stays a pure function
    of the stream state.
    """
    lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=count)
    slack = cfg.f - int(lengths.sum()) - MIN_INTERVAL_GAP * (count - 1)
    if slack < 0:
        raise ValueError("interval packing infeasible for drawn lengths")
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    spans = []
    base = 0
    for i in range(count):
        onset = int(cuts[i]) + base
        spans.append((onset, onset + int(lengths[i])))
        base += int(lengths[i]) + MIN_INTERVAL_GAP
    return spans


def generate_sample(cfg: SyntheticConfig, index: int) -> Sample:
    """Generate one sample from the stream derived for ``index``.

    Pure function of (cfg, index): safe to fan out across workers.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, index]))
    a_v, a_a = _mixing_maps(cfg)

    latent_v = _latent_walk(rng, cfg.f, cfg.latent_dim)
    latent_a = latent_v.copy()

    intervals: list[Interval] = []
    if rng.random() < cfg.p_fake:
        count = int(rng.integers(1, cfg.max_intervals + 1))
        spans = _place_intervals(rng, cfg, count)
        for onset, offset in spans:
            mode = rng.choice([_MODE_VISUAL, _MODE_AUDIO, _MODE_BOTH], p=cfg.modality_mix)
            span = slice(onset, offset)
            if mode in (_MODE_VISUAL, _MODE_BOTH):
                latent_v[span] = _latent_walk(rng, offset - onset, cfg.latent_dim)
                intervals.append(Interval(onset, offset, VISUAL))
            if mode in (_MODE_AUDIO, _MODE_BOTH):
                latent_a[span] = _latent_walk(rng, offset - onset, cfg.latent_dim)
                intervals.append(Interval(onset, offset, AUDIO))

    visual = latent_v @ a_v
    audio = latent_a @ a_a
    if cfg.noise_sigma > 0:
        visual = visual + cfg.noise_sigma * rng.normal(size=visual.shape)
        audio = audio + cfg.noise_sigma * rng.normal(size=audio.shape)

    return Sample(
        id=f"s{index:06d}",
        visual=visual.astype(np.float32),
        audio=audio.astype(np.float32),
        label_visual=int(any(iv.modality == VISUAL for iv in intervals)),
        label_audio=int(any(iv.modality == AUDIO for iv in intervals)),
        intervals=tuple(sorted(intervals, key=lambda iv: (iv.onset, iv.modality))),
    )


def generate_dataset(cfg: SyntheticConfig, count: int, start_index: int = 0) -> list[Sample]:
    return [generate_sample(cfg, start_index + i) for i in range(count)]


# -- on-disk format --------------------------------------------------------


def _blob_bytes(sample: Sample) -> bytes:
    header = MAGIC + struct.pack("<HII", BLOB_VERSION, sample.f, sample.d0)
    v = np.ascontiguousarray(sample.visual, dtype="<f4")
    a = np.ascontiguousarray(sample.audio, dtype="<f4")
    return header + v.tobytes() + a.tobytes()


def write_dataset(samples: Iterable[Sample], path: str | Path) -> None:
    """Write samples as ``manifest.jsonl`` plus one ``<id>.dmf`` blob each."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as manifest:
        for s in samples:
            record = {
                "id": s.id,
                "f": s.f,
                "d0": s.d0,
                "label_visual": s.label_visual,
                "label_audio": s.label_audio,
                "intervals": [
                    [iv.modality, iv.onset, iv.offset] for iv in s.intervals
                ],
            }
            manifest.write(json.dumps(record) + "\n")
            (root / f"{s.id}.dmf").write_bytes(_blob_bytes(s))


def _read_blob(path: Path, f: int, d0: int) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < 14:
        raise TruncatedBlobError(f"{path}: blob shorter than header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, blob_f, blob_d0 = struct.unpack("<HII", raw[4:14])
    if version != BLOB_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if (blob_f, blob_d0) != (f, d0):
        raise DimensionMismatchError(
            f"{path}: manifest says {f}x{d0}, blob says {blob_f}x{blob_d0}"
        )
    expected = 14 + 2 * 4 * f * d0
    if len(raw) != expected:
        raise TruncatedBlobError(
            f"{path}: expected {expected} bytes, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=14)
    visual = flat[: f * d0].reshape(f, d0).copy()
    audio = flat[f * d0 :].reshape(f, d0).copy()
    return visual, audio


def read_dataset(path: str | Path) -> list[Sample]:
    """Read a dataset directory back; exact inverse of ``write_dataset``."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetFormatError(f"missing {manifest_path}")
    samples: list[Sample] = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{manifest_path}:{lineno}: {exc}") from exc
            visual, audio = _read_blob(root / f"{rec['id']}.dmf", rec["f"], rec["d0"])
            intervals = tuple(
                Interval(onset, offset, modality)
                for modality, onset, offset in rec.get("intervals", [])
            )
            samples.append(
                Sample(
                    id=rec["id"],
                    visual=visual,
                    audio=audio,
                    label_visual=int(rec["label_visual"]),
                    label_audio=int(rec["label_audio"]),
                    intervals=intervals,
                )
            )
    return samples


def config_to_dict(cfg: SyntheticConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["modality_mix"] = list(cfg.modality_mix)
    return d
