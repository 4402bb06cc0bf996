"""Training objectives and the finite-difference gradient checker.

Detection trains with plain binary cross-entropy over the per-layer
modality logits. Localization trains with a composite of focal
classification loss, distance-IoU interval loss, and smooth-L1 boundary
loss; components are averaged over pyramid levels, summed over frames and
modalities, and the sum is normalized by the number of fake frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-12

DEFAULT_ALPHA = 0.98
DEFAULT_GAMMA = 2.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class LossBreakdown:
    """Composite localization loss for one sample.

    ``total`` equals (focal + diou + smooth_l1) / max(p, 1) where the
    components are already averaged across pyramid levels and ``p`` counts
    fake frames over both modalities.
    """

    focal: float
    diou: float
    smooth_l1: float
    total: float
    p: int


def loss_dfd_bce(logits, y) -> Tensor:
    """Mean binary cross-entropy over layers and modalities.

    ``logits`` has shape (..., l, 2); ``y`` holds the two modality flags and
    broadcasts against the layer axis. Probabilities are clamped at EPS
    before the logs.
    """
    t = _as_tensor(logits)
    y = np.asarray(y, dtype=t.data.dtype)
    if y.ndim == t.ndim - 1:
        y = np.expand_dims(y, -2)
    p = ad.sigmoid(t)
    term = y * ad.log(ad.clip(p, EPS, 1.0)) + (1.0 - y) * ad.log(
        ad.clip(1.0 - p, EPS, 1.0)
    )
    return -term.mean()


def loss_focal(
    a_hat,
    a,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Class-weighted focusing loss, summed over every element.

    Fake frames weigh ``alpha``, real frames ``1 - alpha``; confident
    predictions are damped by ``(1 - p_t) ** gamma``. ``valid`` masks out
    padded frames, which otherwise would contribute as real ones.
    """
    if not (0.0 < alpha < 1.0) or gamma < 0:
        raise ValueError("need alpha in (0, 1) and gamma >= 0")
    t = _as_tensor(a_hat)
    fake = np.asarray(a, dtype=bool)
    p_t = ad.where(fake, t, 1.0 - t)
    alpha_t = np.where(fake, alpha, 1.0 - alpha).astype(t.data.dtype)
    elem = alpha_t * ((1.0 - p_t) ** gamma) * ad.log(ad.clip(p_t, EPS, 1.0))
    if valid is not None:
        elem = elem * np.asarray(valid, dtype=t.data.dtype)
    return -elem.sum()


def _diou_terms(pred_onset, pred_offset, gt_onset, gt_offset):
    ps, pe = _as_tensor(pred_onset), _as_tensor(pred_offset)
    gs = np.asarray(gt_onset, dtype=ps.data.dtype)
    ge = np.asarray(gt_offset, dtype=ps.data.dtype)
    inter = ad.maximum(ad.minimum(pe, ge) - ad.maximum(ps, gs), 0.0)
    union = ad.maximum(pe - ps, 0.0) + (ge - gs) - inter
    iou = inter / ad.maximum(union, EPS)
    enclosing = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    center_gap = (ps + pe) * 0.5 - (gs + ge) * 0.5
    penalty = center_gap * center_gap / ad.maximum(enclosing * enclosing, EPS)
    return 1.0 - iou + penalty


def loss_diou(pred_onset, pred_offset, gt_onset, gt_offset, fake_mask) -> Tensor:
    """Distance-IoU loss summed over fake frames.

    Inputs are per-frame decoded interval boundaries. A degenerate
    prediction (onset >= offset) contributes IoU 0 plus the center penalty.
    Real frames are masked out by ``fake_mask``.
    """
    elem = _diou_terms(pred_onset, pred_offset, gt_onset, gt_offset)
    mask = np.asarray(fake_mask, dtype=elem.data.dtype)
    return (elem * mask).sum()


def smooth_l1_h(x):
    """Piecewise penalty: quadratic inside |x| < 1, linear outside."""
    if isinstance(x, Tensor):
        small = np.abs(x.data) < 1.0
        return ad.where(small, 0.5 * x * x, ad.absolute(x) - 0.5)
    x = float(x)
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def loss_smooth_l1(pred_onset, pred_offset, gt_onset, gt_offset, fake_mask) -> Tensor:
    """Smooth-L1 boundary loss summed over fake frames."""
    ps, pe = _as_tensor(pred_onset), _as_tensor(pred_offset)
    gs = np.asarray(gt_onset, dtype=ps.data.dtype)
    ge = np.asarray(gt_offset, dtype=ps.data.dtype)
    mask = np.asarray(fake_mask, dtype=ps.data.dtype)
    elem = 0.5 * (smooth_l1_h(gs - ps) + smooth_l1_h(ge - pe))
    return (elem * mask).sum()


def loss_tfl_batch(
    a_hat: Tensor,
    d_s_hat: Tensor,
    d_e_hat: Tensor,
    a: np.ndarray,
    d_s: np.ndarray,
    d_e: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    frame_valid: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Composite localization loss over a batch, kept as one tape.

    Predictions are (B, 2, l, f); targets are (B, 2, f). Each component is
    computed per pyramid level and averaged across levels; per sample the
    summed components are divided by max(fake frames, 1), then the batch is
    averaged. Returns the scalar loss and a float breakdown for logging.
    """
    batch, _, levels, f = a_hat.shape
    dtype = a_hat.data.dtype
    fake = np.asarray(a, dtype=bool)[:, :, None, :]
    fake_f = fake.astype(dtype)
    gt_ds = np.asarray(d_s, dtype=dtype)[:, :, None, :]
    gt_de = np.asarray(d_e, dtype=dtype)[:, :, None, :]
    frames = np.arange(f, dtype=dtype)

    valid = None
    if frame_valid is not None:
        valid = np.asarray(frame_valid, dtype=dtype)[:, None, None, :]

    # focal over classification probabilities
    p_t = ad.where(fake, a_hat, 1.0 - a_hat)
    alpha_t = np.where(fake, alpha, 1.0 - alpha).astype(dtype)
    focal_elem = -(alpha_t * ((1.0 - p_t) ** gamma) * ad.log(ad.clip(p_t, EPS, 1.0)))
    if valid is not None:
        focal_elem = focal_elem * valid
    focal_b = focal_elem.sum(axis=(1, 3)).mean(axis=1)

    # regression terms on per-frame decoded intervals
    ps = frames - d_s_hat
    pe = frames - d_e_hat
    gs = frames - gt_ds
    ge = frames - gt_de
    diou_elem = _diou_terms(ps, pe, gs, ge) * fake_f
    diou_b = diou_elem.sum(axis=(1, 3)).mean(axis=1)
    l1_elem = 0.5 * (smooth_l1_h(d_s_hat - gt_ds) + smooth_l1_h(d_e_hat - gt_de))
    l1_b = (l1_elem * fake_f).sum(axis=(1, 3)).mean(axis=1)

    p_count = np.asarray(a, dtype=np.int64).sum(axis=(1, 2))
    inv_p = (1.0 / np.maximum(p_count, 1)).astype(dtype)
    total_b = (focal_b + diou_b + l1_b) * inv_p
    loss = total_b.mean()
    breakdown = {
        "focal": float((focal_b.data * inv_p).mean()),
        "diou": float((diou_b.data * inv_p).mean()),
        "smooth_l1": float((l1_b.data * inv_p).mean()),
        "total": float(loss.data),
        "p": int(p_count.sum()),
    }
    return loss, breakdown


def loss_tfl_composite(
    a_hat,
    d_s_hat,
    d_e_hat,
    targets: Mapping[str, np.ndarray],
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> LossBreakdown:
    """Composite loss for a single sample.

    Predictions are (2, l, f); ``targets`` maps 'a', 'd_s', 'd_e' to (2, f)
    arrays (see ``intervals.encode_frame_targets``).
    """
    ah = _as_tensor(a_hat)
    two, levels, f = ah.shape
    batched = lambda x: _as_tensor(x).reshape(1, two, levels, f)
    t_a = np.asarray(targets["a"])[None]
    t_ds = np.asarray(targets["d_s"])[None]
    t_de = np.asarray(targets["d_e"])[None]
    loss, bd = loss_tfl_batch(
        batched(a_hat), batched(d_s_hat), batched(d_e_hat),
        t_a, t_ds, t_de, alpha=alpha, gamma=gamma,
    )
    denom = max(bd["p"], 1)
    return LossBreakdown(
        focal=bd["focal"] * denom,
        diou=bd["diou"] * denom,
        smooth_l1=bd["smooth_l1"] * denom,
        total=bd["total"],
        p=bd["p"],
    )


def targets_from_frame_targets(per_modality) -> dict[str, np.ndarray]:
    """Stack ``encode_frame_targets`` output into (2, f) arrays."""
    v, a = per_modality["visual"], per_modality["audio"]
    return {
        "a": np.stack([v.a, a.a]),
        "d_s": np.stack([v.d_s, a.d_s]),
        "d_e": np.stack([v.d_e, a.d_e]),
    }


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    non_finite: list[str] = field(default_factory=list)
    tolerance: float = 1e-4
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_rel_error < self.tolerance

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (
            f"{state}: max rel error {self.max_rel_error:.3e} over "
            f"{self.checked_entries} entries (worst: {worst})"
        )


def check_gradients(
    loss_fn: Callable,
    params: Mapping[str, Tensor],
    inputs=None,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_entries_per_param: int = 512,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences vs. backward-pass gradients, in float64.

    ``loss_fn(params)`` (or ``loss_fn(params, inputs)``) must return a
    scalar Tensor and be deterministic. Entries of big tensors are
    subsampled; the relative error denominator is floored at 1e-3 so a
    zero-gradient entry compares at absolute scale.
    """
    params64 = {
        name: Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=True)
        for name, t in params.items()
    }
    call = (lambda: loss_fn(params64, inputs)) if inputs is not None else (
        lambda: loss_fn(params64)
    )

    out = call()
    if out.data.shape != ():
        raise ValueError("loss_fn must return a scalar")
    out.backward()
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params64.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, t in params64.items():
        grad = analytic[name]
        if not np.isfinite(grad).all():
            report.non_finite.append(name)
            continue
        flat = t.data.reshape(-1)
        size = flat.size
        if size > max_entries_per_param:
            idxs = rng.choice(size, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(size)
        worst = 0.0
        gflat = grad.reshape(-1)
        with ad.no_grad():
            for i in idxs:
                old = flat[i]
                flat[i] = old + step
                f_plus = float(call().data)
                flat[i] = old - step
                f_minus = float(call().data)
                flat[i] = old
                numeric = (f_plus - f_minus) / (2.0 * step)
                a_val = float(gflat[i])
                rel = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-3)
                if rel > worst:
                    worst = rel
                if rel >= tolerance:
                    report.failures.append((name, int(i), a_val, numeric, rel))
        report.per_param[name] = worst
        report.checked_entries += len(idxs)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
