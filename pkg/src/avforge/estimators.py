"""Scikit-learn style estimators wrapping the training loop.

``TemporalForgeryLocalizer`` and ``DeepfakeDetector`` expose the usual
``fit`` / ``predict`` / ``get_params`` surface so the models compose with
sklearn tooling (``clone``, pipelines, searches). ``X`` is a list of
``syndata.Sample`` objects; labels and intervals travel inside the samples,
so ``y`` is accepted but ignored.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .intervals import Proposal
from .metrics import ap_at_iou
from .model import DFD, TFL, ModelConfig
from .syndata import Sample
from .trainer import TrainConfig, decode_records, evaluate, train


def check_sample_list(X: Sequence[Sample], name: str = "X") -> list[Sample]:
    """Validate a dataset: Sample instances with one feature dimension."""
    samples = list(X)
    if not samples:
        raise ValueError(f"{name} must contain at least one sample")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"{name} must hold Sample objects, got {type(s).__name__}")
    d0s = {s.d0 for s in samples}
    if len(d0s) != 1:
        raise ValueError(f"{name} mixes feature dimensions: {sorted(d0s)}")
    return samples


def check_is_fitted(estimator, attr: str = "network_") -> None:
    if not hasattr(estimator, attr):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )


class _BaseAvEstimator(BaseEstimator):
    _task = TFL

    def _train_configs(self, d0: int) -> tuple[ModelConfig, TrainConfig]:
        model_cfg = ModelConfig(
            d=self.d, r=self.r, u=self.u, l=self.l, q=self.q,
            f_max=self.f_max, d0=d0, task=self._task,
        )
        train_cfg = TrainConfig(
            task=self._task,
            epochs=self.epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            lr=self.lr,
            plateau_factor=self.plateau_factor,
            plateau_patience=self.plateau_patience,
            alpha=self.alpha,
            gamma=self.gamma,
            seed=self.seed,
        )
        return model_cfg, train_cfg

    def _split(self, samples: list[Sample], validation) -> tuple[list[Sample], list[Sample]]:
        if validation is not None:
            return samples, check_sample_list(validation, "validation")
        if len(samples) < 2:
            raise ValueError("need at least 2 samples to split off validation data")
        n_val = max(1, int(round(len(samples) * self.val_fraction)))
        n_val = min(n_val, len(samples) - 1)
        order = np.random.default_rng(self.seed).permutation(len(samples))
        val_idx = set(order[:n_val].tolist())
        train_part = [s for i, s in enumerate(samples) if i not in val_idx]
        val_part = [s for i, s in enumerate(samples) if i in val_idx]
        return train_part, val_part

    def fit(self, X, y=None, validation: Sequence[Sample] | None = None):
        """Train on samples; labels are read from the samples themselves."""
        samples = check_sample_list(X)
        train_part, val_part = self._split(samples, validation)
        model_cfg, train_cfg = self._train_configs(samples[0].d0)
        result = train(model_cfg, train_cfg, train_part, val_part, verbose=self.verbose)
        self.network_ = result.network
        self.train_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_metric_ = result.best_metric
        return self


class TemporalForgeryLocalizer(_BaseAvEstimator):
    """Locates fake intervals in paired feature streams.

    ``predict`` returns one ranked proposal list per sample; ``score`` is
    the joint AP at IoU 0.5 against the samples' annotated intervals.
    """

    _task = TFL

    def __init__(
        self,
        d: int = 32,
        r: int = 2,
        u: int = 1,
        l: int = 3,
        q: int = 15,
        f_max: int = 600,
        lr: float = 1e-3,
        batch_size: int = 16,
        epochs: int = 100,
        patience: int = 10,
        plateau_factor: float = 0.1,
        plateau_patience: int = 5,
        alpha: float = 0.98,
        gamma: float = 2.0,
        decode_threshold: float = 0.5,
        nms_iou: float = 0.5,
        max_proposals: int = 100,
        val_fraction: float = 0.2,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.d = d
        self.r = r
        self.u = u
        self.l = l
        self.q = q
        self.f_max = f_max
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.alpha = alpha
        self.gamma = gamma
        self.decode_threshold = decode_threshold
        self.nms_iou = nms_iou
        self.max_proposals = max_proposals
        self.val_fraction = val_fraction
        self.seed = seed
        self.verbose = verbose

    def predict(self, X) -> list[list[Proposal]]:
        check_is_fitted(self)
        samples = check_sample_list(X)
        records = decode_records(
            self.network_, samples,
            threshold=self.decode_threshold,
            nms_iou=self.nms_iou,
            max_proposals=self.max_proposals,
        )
        return [list(r.proposals) for r in records]

    def evaluate(self, X, joint: bool = True) -> dict:
        check_is_fitted(self)
        report, _ = evaluate(
            self.network_, check_sample_list(X), TFL, joint=joint,
            threshold=self.decode_threshold, nms_iou=self.nms_iou,
            max_proposals=self.max_proposals,
        )
        return report

    def score(self, X, y=None) -> float:
        """Joint AP@0.5 on the given samples."""
        check_is_fitted(self)
        samples = check_sample_list(X)
        records = decode_records(
            self.network_, samples,
            threshold=self.decode_threshold,
            nms_iou=self.nms_iou,
            max_proposals=self.max_proposals,
        )
        ap = ap_at_iou([r.joint() for r in records], 0.5)
        return 0.0 if ap is None else float(ap)


class DeepfakeDetector(_BaseAvEstimator):
    """Video-level fake/real classifier over paired feature streams.

    ``predict_proba`` follows the sklearn binary layout (columns: real,
    fake); the fake probability is the max over modalities of the sigmoid
    of the layer-averaged logits.
    """

    _task = DFD

    def __init__(
        self,
        d: int = 32,
        r: int = 2,
        u: int = 1,
        l: int = 3,
        q: int = 0,
        f_max: int = 600,
        lr: float = 1e-3,
        batch_size: int = 16,
        epochs: int = 100,
        patience: int = 10,
        plateau_factor: float = 0.1,
        plateau_patience: int = 5,
        alpha: float = 0.98,
        gamma: float = 2.0,
        threshold: float = 0.5,
        val_fraction: float = 0.2,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.d = d
        self.r = r
        self.u = u
        self.l = l
        self.q = q
        self.f_max = f_max
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.alpha = alpha
        self.gamma = gamma
        self.threshold = threshold
        self.val_fraction = val_fraction
        self.seed = seed
        self.verbose = verbose

    @property
    def classes_(self):
        return np.array([0, 1])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        samples = check_sample_list(X)
        records = decode_records(self.network_, samples)
        fake = np.array([r.video_score for r in records])
        return np.column_stack([1.0 - fake, fake])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > self.threshold).astype(np.int64)

    def evaluate(self, X) -> dict:
        check_is_fitted(self)
        report, _ = evaluate(self.network_, check_sample_list(X), DFD)
        return report

    def score(self, X, y=None) -> float:
        """Accuracy at the configured threshold (sklearn convention)."""
        samples = check_sample_list(X)
        pred = self.predict(samples)
        truth = np.array([int(s.is_fake) for s in samples])
        return float((pred == truth).mean())
