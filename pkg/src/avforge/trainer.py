"""Optimization loop: batching, Adam, plateau LR schedule, checkpointing.

Training is fully seeded: parameter init, shuffling, and evaluation are
deterministic functions of (config, seed, data), so identical runs produce
identical logs and checkpoints under fixed threading. The checkpoint
criterion is task-dependent: ROC AUC for detection, the summed joint AP/AR
selection for localization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .intervals import Interval, Proposal, encode_frame_targets, merge_proposals
from .losses import loss_dfd_bce, loss_tfl_batch
from .metrics import (
    EvalRecord,
    dfd_report,
    tfl_checkpoint_metric,
    tfl_report,
)
from .model import DFD, TFL, ModelConfig, Network
from .syndata import Sample

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "TrainResult",
    "Batch",
    "pad_and_mask_batch",
    "AdamState",
    "init_adam",
    "adam_step",
    "PlateauState",
    "plateau_step",
    "train",
    "evaluate",
    "decode_records",
]


@dataclass
class TrainConfig:
    task: str = TFL
    epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    alpha: float = 0.98
    gamma: float = 2.0
    seed: int = 0
    decode_threshold: float = 0.5
    nms_iou: float = 0.5
    max_proposals: int = 100
    level_aggregate: str = "mean"  # how pyramid levels combine before decoding

    def __post_init__(self):
        if self.task not in (DFD, TFL):
            raise ValueError(f"task must be '{DFD}' or '{TFL}'")
        if min(self.epochs, self.patience, self.batch_size, self.plateau_patience) < 1:
            raise ValueError("counts must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError("plateau factor must be in (0, 1)")
        if self.level_aggregate not in ("mean", "deepest"):
            raise ValueError("level_aggregate must be 'mean' or 'deepest'")


@dataclass
class EpochRecord:
    epoch: int
    train: dict
    val: dict
    val_metric: float
    lr: float
    wall_s: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    aborted: bool = False
    skipped_steps: int = 0

    def to_jsonl(self) -> str:
        import json

        lines = [json.dumps(asdict(r)) for r in self.records]
        if self.aborted:
            lines.append(json.dumps({"aborted": True}))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "TrainLog":
        import json

        log = TrainLog()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("aborted"):
                log.aborted = True
                continue
            log.records.append(EpochRecord(**rec))
        return log


@dataclass
class TrainResult:
    network: Network
    log: TrainLog
    best_epoch: int
    best_metric: float


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    visual: np.ndarray
    audio: np.ndarray
    lengths: np.ndarray
    frame_valid: np.ndarray | None
    a: np.ndarray
    d_s: np.ndarray
    d_e: np.ndarray
    labels: np.ndarray
    ids: list[str]


def pad_and_mask_batch(samples: Sequence[Sample], f_max: int = 600) -> Batch:
    """Zero-pad samples to the batch maximum and encode frame targets.

    Padded frames are marked invalid so losses and decoding skip them; when
    every sample already has the batch length the mask is None.
    """
    if not samples:
        raise ValueError("empty batch")
    lengths = np.array([s.f for s in samples], dtype=np.int64)
    if (lengths > f_max).any():
        raise ValueError(f"sample length exceeds f_max={f_max}")
    f = int(lengths.max())
    b = len(samples)
    d0 = samples[0].d0
    visual = np.zeros((b, f, d0), dtype=np.float32)
    audio = np.zeros((b, f, d0), dtype=np.float32)
    a = np.zeros((b, 2, f), dtype=np.int8)
    d_s = np.zeros((b, 2, f), dtype=np.float32)
    d_e = np.zeros((b, 2, f), dtype=np.float32)
    labels = np.zeros((b, 2), dtype=np.int8)
    for i, s in enumerate(samples):
        if s.d0 != d0:
            raise ValueError("inconsistent feature dimensions in batch")
        visual[i, : s.f] = s.visual
        audio[i, : s.f] = s.audio
        targets = encode_frame_targets(s.intervals, s.f)
        for m, mi in (("visual", 0), ("audio", 1)):
            a[i, mi, : s.f] = targets[m].a
            d_s[i, mi, : s.f] = targets[m].d_s
            d_e[i, mi, : s.f] = targets[m].d_e
        labels[i] = (s.label_visual, s.label_audio)
    frame_valid = None
    if (lengths != f).any():
        frame_valid = np.arange(f)[None, :] < lengths[:, None]
    return Batch(visual, audio, lengths, frame_valid, a, d_s, d_e, labels,
                 [s.id for s in samples])


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> bool:
    """One bias-corrected Adam update in place; skips non-finite gradients.

    Returns False (state untouched) when any gradient is non-finite.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 5
    best: float = -np.inf
    bad_epochs: int = 0


def plateau_step(state: PlateauState, val_metric: float) -> float:
    """Reduce-on-plateau for a higher-is-better metric; returns current lr."""
    if val_metric > state.best:
        state.best = val_metric
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# -- decoding and evaluation ---------------------------------------------------


def _iter_batches(samples: Sequence[Sample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        yield samples[i : i + batch_size]


def decode_records(
    network: Network,
    samples: Sequence[Sample],
    threshold: float = 0.5,
    nms_iou: float = 0.5,
    max_proposals: int = 100,
    batch_size: int = 64,
    level_aggregate: str = "mean",
) -> list[EvalRecord]:
    """Forward + frame decoding + per-modality NMS into evaluation records.

    For localization, per-frame probabilities and distances are combined
    over pyramid levels (mean, or just the deepest level) before decoding;
    a record's video score is its top proposal confidence. For detection
    the video score is the max over modalities of the sigmoid of the
    layer-averaged logits.
    """
    records: list[EvalRecord] = []
    task = network.config.task
    for chunk in _iter_batches(samples, batch_size):
        batch = pad_and_mask_batch(chunk, network.config.f_max)
        with ad.no_grad():
            out = network.forward(batch.visual, batch.audio, batch.lengths)
        if task == DFD:
            logits = out.data.mean(axis=1)
            scores = 1.0 / (1.0 + np.exp(-logits))
            for i, s in enumerate(chunk):
                records.append(
                    EvalRecord(
                        id=s.id,
                        proposals=(),
                        gt_intervals=s.intervals,
                        video_score=float(scores[i].max()),
                        video_label=int(s.is_fake),
                    )
                )
            continue
        if level_aggregate == "deepest":
            a_avg = out.a_hat.data[:, :, -1]
            ds_avg = out.d_s.data[:, :, -1]
            de_avg = out.d_e.data[:, :, -1]
        else:
            a_avg = out.a_hat.data.mean(axis=2)
            ds_avg = out.d_s.data.mean(axis=2)
            de_avg = out.d_e.data.mean(axis=2)
        for i, s in enumerate(chunk):
            proposals: list[Proposal] = []
            for mi, modality in ((0, "visual"), (1, "audio")):
                frames = np.flatnonzero(a_avg[i, mi, : s.f] > threshold)
                raw = []
                for j in frames:
                    onset = float(j - ds_avg[i, mi, j])
                    offset = float(j - de_avg[i, mi, j])
                    if onset >= offset:
                        continue
                    raw.append(
                        Proposal(
                            Interval(max(onset, 0.0), offset, modality),
                            float(a_avg[i, mi, j]),
                        )
                    )
                proposals.extend(merge_proposals(raw, nms_iou)[:max_proposals])
            proposals.sort(key=lambda pr: -pr.confidence)
            records.append(
                EvalRecord(
                    id=s.id,
                    proposals=tuple(proposals),
                    gt_intervals=s.intervals,
                    video_score=proposals[0].confidence if proposals else 0.0,
                    video_label=int(s.is_fake),
                )
            )
    return records


def evaluate(
    network: Network,
    samples: Sequence[Sample],
    task: str,
    joint: bool = True,
    threshold: float = 0.5,
    nms_iou: float = 0.5,
    max_proposals: int = 100,
    batch_size: int = 64,
    level_aggregate: str = "mean",
) -> tuple[dict, list[EvalRecord]]:
    """Metric report plus the decoded records it was computed from."""
    if task != network.config.task:
        raise ValueError(
            f"checkpoint was trained for '{network.config.task}', not '{task}'"
        )
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    records = decode_records(
        network, samples, threshold=threshold, nms_iou=nms_iou,
        max_proposals=max_proposals, batch_size=batch_size,
        level_aggregate=level_aggregate,
    )
    if task == DFD:
        report = dfd_report(records)
        report["checkpoint_metric"] = report["auc"] if report["auc"] is not None else 0.0
    else:
        report = tfl_report(records, joint=joint)
        report["checkpoint_metric"] = tfl_checkpoint_metric(records)
    return report, records


# -- training loop --------------------------------------------------------------


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(config: ModelConfig, snap: dict[str, np.ndarray]) -> Network:
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in snap.items()}
    return Network(config, params=params)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    verbose: bool = False,
) -> TrainResult:
    """Full optimization run returning the best checkpoint and the log."""
    if model_cfg.task != train_cfg.task:
        raise ValueError("model and train configs disagree on the task")
    if not train_samples or not val_samples:
        raise ValueError("need non-empty train and validation sets")

    network = Network(model_cfg, seed=train_cfg.seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    adam = init_adam(network.params)
    plateau = PlateauState(
        lr=train_cfg.lr,
        factor=train_cfg.plateau_factor,
        patience=train_cfg.plateau_patience,
    )
    log = TrainLog()
    best_metric = -np.inf
    best_epoch = -1
    best_snap = _snapshot(network.params)
    bad_epochs = 0
    n = len(train_samples)
    param_keys = list(network.params)

    for epoch in range(1, train_cfg.epochs + 1):
        start = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        diverged = False
        for lo in range(0, n, train_cfg.batch_size):
            chunk = [train_samples[i] for i in perm[lo : lo + train_cfg.batch_size]]
            batch = pad_and_mask_batch(chunk, model_cfg.f_max)
            out = network.forward(batch.visual, batch.audio, batch.lengths)
            if train_cfg.task == DFD:
                loss = loss_dfd_bce(out, batch.labels)
                parts = {"total": float(loss.data)}
            else:
                loss, parts = loss_tfl_batch(
                    out.a_hat, out.d_s, out.d_e,
                    batch.a, batch.d_s, batch.d_e,
                    alpha=train_cfg.alpha, gamma=train_cfg.gamma,
                    frame_valid=batch.frame_valid,
                )
            if not np.isfinite(loss.data):
                diverged = True
                break
            for p in network.params.values():
                p.zero_grad()
            loss.backward()
            grads = {
                k: (network.params[k].grad
                    if network.params[k].grad is not None
                    else np.zeros_like(network.params[k].data))
                for k in param_keys
            }
            if not adam_step(network.params, grads, adam, plateau.lr):
                log.skipped_steps += 1
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + float(value)
            batches += 1

        if diverged:
            log.aborted = True
            break

        report, _ = evaluate(
            network, val_samples, train_cfg.task,
            threshold=train_cfg.decode_threshold, nms_iou=train_cfg.nms_iou,
            max_proposals=train_cfg.max_proposals,
            level_aggregate=train_cfg.level_aggregate,
        )
        val_metric = float(report["checkpoint_metric"])
        lr_used = plateau.lr
        plateau_step(plateau, val_metric)
        record = EpochRecord(
            epoch=epoch,
            train={k: v / max(batches, 1) for k, v in sums.items()},
            val=_flatten_report(report),
            val_metric=val_metric,
            lr=lr_used,
            wall_s=round(time.perf_counter() - start, 3),
        )
        log.records.append(record)
        if verbose:
            print(
                f"epoch {epoch:3d}  loss {record.train.get('total', float('nan')):.4f}"
                f"  val {val_metric:.4f}  lr {lr_used:.2e}  {record.wall_s:.1f}s",
                flush=True,
            )

        if val_metric > best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_snap = _snapshot(network.params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break

    return TrainResult(
        network=_restore(model_cfg, best_snap),
        log=log,
        best_epoch=best_epoch,
        best_metric=float(best_metric),
    )


def _flatten_report(report: dict) -> dict:
    flat: dict = {}
    for key, value in report.items():
        if isinstance(value, dict):
            for sub, num in value.items():
                flat[f"{key}.{sub}"] = num
        else:
            flat[key] = value
    return flat
