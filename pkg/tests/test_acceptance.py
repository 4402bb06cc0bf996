"""Acceptance suite: one test per release criterion, each printing a verdict.

Criteria 1-5 are fast numeric/property gates. Criteria 6-10 train on the
synthetic corpus (seed 42, 2000 train / 500 val) and take several minutes
per run on one CPU thread; run with ``pytest tests/test_acceptance.py -v -s``
to watch the per-criterion lines.
"""

import math
import time

import numpy as np
import pytest

from avforge import autodiff as ad
from avforge.autodiff import Tensor
from avforge.divergence import cross_stream_divergence
from avforge.intervals import Interval, decode_frame, encode_frame_targets
from avforge.losses import (
    check_gradients,
    loss_dfd_bce,
    loss_diou,
    loss_focal,
    loss_smooth_l1,
    loss_tfl_batch,
    smooth_l1_h,
    targets_from_frame_targets,
)
from avforge.metrics import ap_at_iou, ar_at_n, binary_ap, roc_auc
from avforge.model import ModelConfig, Network
from avforge.syndata import SyntheticConfig, generate_dataset
from avforge.trainer import TrainConfig, evaluate, train

from oracles import (
    ap_oracle,
    ar_oracle,
    auc_oracle,
    binary_ap_oracle,
    random_records,
)

e2e = pytest.mark.e2e

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-9
PROPERTY_TOL = 1e-6

# synthetic end-to-end budget (criteria 6-10)
DATA_SEED = 42
N_TRAIN, N_VAL = 2000, 500
TFL_MODEL = dict(d=32, r=2, u=1, l=3, q=15, f_max=600, d0=16)
E2E_EPOCHS = 40
E2E_TRAIN = dict(batch_size=32, lr=3e-3, seed=0, patience=12, plateau_patience=6)


def verdict(criterion: int, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


RELU_BIASES = ("proj.b0", "proj.b1", "dfd.b1", "dfd.b2",
               "cls_head.b0", "cls_head.b1", "reg_head.b0", "reg_head.b1",
               "enc0.mlp.b1", "enc1.mlp.b1")


def condition_for_fd(net: Network, shift: float = 0.25) -> Network:
    """Move ReLU pre-activations away from their kinks.

    Central differences are only a valid derivative estimate away from
    non-differentiable points; a random init leaves some pre-activation
    within the 1e-4 step of zero, which shows up as a spurious mismatch.
    Shifting the ReLU-feeding biases keeps the check meaningful for every
    backward formula while staying clear of the kinks. The fixture seeds
    below were verified to leave >15x margin under the tolerance.
    """
    for k in RELU_BIASES:
        if k in net.params:
            net.params[k].data += shift
    return net


class TestCriterion1GradientSuite:
    def test_gradient_suite(self):
        start = time.perf_counter()
        rng = np.random.default_rng(8)
        worst = {}

        # standalone losses through their direct inputs
        fake = rng.integers(0, 2, (2, 9))
        tf = {"d_s": fake * rng.uniform(1, 4, (2, 9)),
              "d_e": -fake * rng.uniform(1, 4, (2, 9))}
        frames = np.arange(9, dtype=float)
        loss_params = {
            "logits": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
            "raw": Tensor(rng.normal(size=(2, 9)), requires_grad=True),
            "ds": Tensor(rng.uniform(0.5, 5, (2, 9)), requires_grad=True),
            "de": Tensor(rng.uniform(-5, -0.5, (2, 9)), requires_grad=True),
        }

        def bce_fn(p):
            return loss_dfd_bce(p["logits"], np.array([1, 0]))

        def focal_fn(p):
            return loss_focal(ad.sigmoid(p["raw"]), fake)

        def diou_fn(p):
            return loss_diou(frames - p["ds"], frames - p["de"],
                             frames - tf["d_s"], frames - tf["d_e"], fake)

        def l1_fn(p):
            return loss_smooth_l1(frames - p["ds"], frames - p["de"],
                                  frames - tf["d_s"], frames - tf["d_e"], fake)

        for name, fn in (("bce", bce_fn), ("focal", focal_fn),
                         ("diou", diou_fn), ("smooth_l1", l1_fn)):
            rep = check_gradients(fn, loss_params, tolerance=GRAD_TOL)
            worst[name] = rep.max_rel_error
            assert rep.passed, f"{name}: {rep.summary()}"

        # composite + full model, localization task
        f, d0 = 12, 4
        rngx = np.random.default_rng(7)
        v = rngx.normal(size=(1, f, d0))
        a = rngx.normal(size=(1, f, d0))
        targets = targets_from_frame_targets(encode_frame_targets(
            [Interval(2, 7, "visual"), Interval(5, 9, "audio")], f))
        cfg = ModelConfig(d=8, r=2, u=1, l=2, q=5, f_max=16, d0=d0, task="tfl")
        net = condition_for_fd(Network(cfg, seed=21, dtype=np.float64))

        def tfl_fn(params):
            preds = Network(cfg, dtype=np.float64, params=params).forward(v, a)
            loss, _ = loss_tfl_batch(
                preds.a_hat, preds.d_s, preds.d_e,
                targets["a"][None], targets["d_s"][None], targets["d_e"][None])
            return loss

        rep = check_gradients(tfl_fn, net.params, tolerance=GRAD_TOL)
        worst["model+composite"] = rep.max_rel_error
        assert rep.passed, rep.summary()

        # full model, detection task
        cfg_d = ModelConfig(d=8, r=2, u=1, l=2, q=5, f_max=16, d0=d0, task="dfd")
        net_d = condition_for_fd(Network(cfg_d, seed=13, dtype=np.float64))

        def dfd_fn(params):
            logits = Network(cfg_d, dtype=np.float64, params=params).forward(v, a)
            return loss_dfd_bce(logits, np.array([[1, 0]]))

        rep_d = check_gradients(dfd_fn, net_d.params, tolerance=GRAD_TOL)
        worst["model+bce"] = rep_d.max_rel_error
        assert rep_d.passed, rep_d.summary()

        elapsed = time.perf_counter() - start
        assert elapsed < 120, f"gradient suite took {elapsed:.0f}s"
        verdict(1, True,
                f"max rel err {max(worst.values()):.2e} over "
                f"{', '.join(worst)} in {elapsed:.0f}s")


class TestCriterion2ClosedFormValues:
    def test_closed_form_values(self):
        checks = {
            "h(0.5)": (smooth_l1_h(0.5), 0.125),
            "h(2)": (smooth_l1_h(2.0), 1.5),
            "focal fake@0.5": (
                loss_focal(np.array([0.5]), np.array([1]), 0.98, 2.0).item(),
                0.98 * 0.25 * math.log(2.0),
            ),
            "focal real@0.5": (
                loss_focal(np.array([0.5]), np.array([0]), 0.98, 2.0).item(),
                0.02 * 0.25 * math.log(2.0),
            ),
            "diou [0,2) vs [8,10)": (
                loss_diou(np.array([0.0]), np.array([2.0]), np.array([8.0]),
                          np.array([10.0]), np.array([1])).item(),
                1.64,
            ),
            "bce uniform logits": (
                loss_dfd_bce(np.zeros((4, 2)), np.array([1, 0])).item(),
                math.log(2.0),
            ),
        }
        for name, (got, want) in checks.items():
            assert abs(got - want) < 1e-6, f"{name}: {got} vs {want}"
        verdict(2, True, "all closed-form loss values match to 1e-6")


class TestCriterion3RoundTrip:
    def test_thousand_interval_sets(self):
        rng = np.random.default_rng(3003)
        checked = 0
        for _ in range(1000):
            f = int(rng.integers(8, 140))
            intervals = []
            cursor = 0
            while len(intervals) < int(rng.integers(1, 5)):
                onset = cursor + int(rng.integers(0, 12))
                length = int(rng.integers(1, 25))
                if onset + length > f:
                    break
                intervals.append(Interval(onset, onset + length, "visual"))
                cursor = onset + length
            if not intervals:
                continue
            enc = encode_frame_targets(intervals, f)["visual"]
            decoded = set()
            for j in range(f):
                if enc.a[j]:
                    out = decode_frame(j, 1.0, enc.d_s[j], enc.d_e[j])
                    decoded.add((out.onset, out.offset))
            assert decoded == {(float(i.onset), float(i.offset)) for i in intervals}
            checked += 1
        assert checked >= 900
        verdict(3, True, f"exact recovery on {checked} random interval sets")


class TestCriterion4MetricOracles:
    def test_oracle_equivalence(self):
        rng = np.random.default_rng(4004)
        worst = 0.0
        for _ in range(100):
            recs = random_records(rng, int(rng.integers(1, 6)), max_items=20)
            thr = float(rng.choice([0.3, 0.5, 0.75, 0.9]))
            budget = int(rng.integers(1, 12))
            for got, want in (
                (ap_at_iou(recs, thr), ap_oracle(recs, thr)),
                (ar_at_n(recs, budget), ar_oracle(recs, budget)),
            ):
                assert (got is None) == (want is None)
                if got is not None:
                    worst = max(worst, abs(got - want))
            m = int(rng.integers(2, 20))
            labels = rng.integers(0, 2, m)
            if labels.sum() in (0, m):
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(m), 1)
            worst = max(worst, abs(roc_auc(scores, labels)
                                   - auc_oracle(scores.tolist(), labels.tolist())))
            worst = max(worst, abs(binary_ap(scores, labels)
                                   - binary_ap_oracle(scores.tolist(), labels.tolist())))
        assert worst < ORACLE_TOL
        verdict(4, True, f"100 instances per metric, worst |diff| {worst:.1e}")


class TestCriterion5ModelProperties:
    def test_locality_and_padding(self):
        from avforge.model import assemble_tokens, encode, mask_for_layout, project_features

        worst_pad = 0.0
        for seed in range(20):
            rng = np.random.default_rng(9000 + seed)
            q = int(rng.choice([2, 4, 6, 8]))
            f = int(rng.integers(6, 14))
            d0 = int(rng.choice([3, 4, 6]))
            cfg = ModelConfig(d=8, r=2, u=1, l=1, q=q, f_max=40, d0=d0, task="tfl")
            net = Network(cfg, seed=seed, dtype=np.float64)

            # locality at layer 1: a perturbed token only moves outputs in-band
            vp = project_features(rng.normal(size=(1, f, d0)), net.params, cfg)
            apj = project_features(rng.normal(size=(1, f, d0)), net.params, cfg)
            tokens, layout = assemble_tokens(vp, apj, net.params, cfg)
            mask = mask_for_layout(layout, q)
            base = encode(tokens.detach(), mask, net.params, cfg, layout)
            i = int(rng.integers(0, layout.n_max))
            bumped = tokens.data.copy()
            bumped[0, i] += 1.0
            pert = encode(Tensor(bumped), mask, net.params, cfg, layout)
            delta = np.abs(pert.z.data[0, :, 0, :] - base.z.data[0, :, 0, :]).max(-1)
            token_pos = np.concatenate([np.arange(0, f), np.arange(f + 1, 2 * f + 1)])
            for pos, d in zip(token_pos, delta):
                if abs(pos - i) > q // 2:
                    assert d < PROPERTY_TOL, (seed, pos, i, d)

            # padding invariance on the deeper model
            cfg2 = ModelConfig(d=8, r=2, u=1, l=2, q=q, f_max=40, d0=d0, task="tfl")
            net2 = Network(cfg2, seed=seed, dtype=np.float64)
            pad = int(rng.integers(1, 6))
            v = rng.normal(size=(2, f, d0))
            a = rng.normal(size=(2, f, d0))
            baseo = net2.forward(v, a)
            vpad = np.concatenate([v, rng.normal(size=(2, pad, d0))], axis=1)
            apad = np.concatenate([a, rng.normal(size=(2, pad, d0))], axis=1)
            pado = net2.forward(vpad, apad, lengths=np.array([f, f]))
            for attr in ("a_hat", "d_s", "d_e"):
                diff = np.abs(getattr(pado, attr).data[..., :f]
                              - getattr(baseo, attr).data).max()
                worst_pad = max(worst_pad, diff)
                assert diff < PROPERTY_TOL, (seed, attr, diff)
        verdict(5, True,
                f"locality + padding invariance on 20 configs, worst pad diff "
                f"{worst_pad:.1e}")


# -- synthetic end-to-end runs -------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    cfg = SyntheticConfig(seed=DATA_SEED)
    return (generate_dataset(cfg, N_TRAIN),
            generate_dataset(cfg, N_VAL, start_index=N_TRAIN))


def run_tfl(corpus, q: int):
    tr, va = corpus
    model_cfg = ModelConfig(task="tfl", **{**TFL_MODEL, "q": q})
    train_cfg = TrainConfig(task="tfl", epochs=E2E_EPOCHS, **E2E_TRAIN)
    start = time.perf_counter()
    result = train(model_cfg, train_cfg, tr, va)
    wall = time.perf_counter() - start
    report, _ = evaluate(result.network, va, "tfl")
    return result, report, wall


def run_dfd(corpus):
    tr, va = corpus
    model_cfg = ModelConfig(task="dfd", **{**TFL_MODEL, "q": 0})
    train_cfg = TrainConfig(task="dfd", epochs=20, **{**E2E_TRAIN, "patience": 8})
    start = time.perf_counter()
    result = train(model_cfg, train_cfg, tr, va)
    wall = time.perf_counter() - start
    report, _ = evaluate(result.network, va, "dfd")
    return result, report, wall


@pytest.fixture(scope="module")
def tfl_run(corpus):
    return run_tfl(corpus, q=15)


@pytest.fixture(scope="module")
def dfd_run(corpus):
    return run_dfd(corpus)


@e2e
class TestCriterion6SyntheticTfl:
    def test_localization_end_to_end(self, tfl_run):
        result, report, wall = tfl_run
        ap50 = report["joint"]["ap@0.5"]
        ar10 = report["joint"]["ar@10"]
        ok = ap50 >= 0.85 and ar10 >= 0.80 and wall <= 45 * 60
        verdict(6, ok,
                f"joint AP@0.5={ap50:.3f} (>=0.85) AR@10={ar10:.3f} (>=0.80) "
                f"in {wall/60:.1f} min, best epoch {result.best_epoch}")
        assert ap50 >= 0.85, f"joint AP@0.5 {ap50:.3f} below 0.85"
        assert ar10 >= 0.80, f"joint AR@10 {ar10:.3f} below 0.80"
        assert wall <= 45 * 60


@e2e
class TestCriterion7SyntheticDfd:
    def test_detection_end_to_end(self, dfd_run):
        result, report, wall = dfd_run
        auc = report["auc"]
        ok = auc >= 0.95 and wall <= 45 * 60
        verdict(7, ok, f"AUC={auc:.4f} (>=0.95) in {wall/60:.1f} min, "
                       f"best epoch {result.best_epoch}")
        assert auc >= 0.95, f"AUC {auc:.4f} below 0.95"
        assert wall <= 45 * 60


@e2e
class TestCriterion8WindowAblation:
    def test_local_window_vs_global(self, corpus, tfl_run):
        _, report_local, _ = tfl_run
        _, report_global, _ = run_tfl(corpus, q=0)
        ap_local = report_local["joint"]["ap@0.5"]
        ap_global = report_global["joint"]["ap@0.5"]
        hard_ok = ap_local >= ap_global - 0.05
        soft_ok = ap_local >= ap_global
        verdict(8, hard_ok,
                f"q=15 AP@0.5={ap_local:.3f} vs q=0 AP@0.5={ap_global:.3f}"
                + ("" if soft_ok else " (soft check: global won, within 0.05 slack)"))
        assert hard_ok, (
            f"global attention beat the local window by more than 0.05 "
            f"({ap_global:.3f} vs {ap_local:.3f})")


@e2e
class TestCriterion9DivergenceDirection:
    def test_fake_divergence_exceeds_real(self, corpus):
        _, va = corpus
        fake = [cross_stream_divergence(s.visual, s.audio) for s in va if s.is_fake]
        real = [cross_stream_divergence(s.visual, s.audio) for s in va if not s.is_fake]
        mean_fake, mean_real = float(np.mean(fake)), float(np.mean(real))
        ok = mean_fake > mean_real
        verdict(9, ok,
                f"divergence mean fake={mean_fake:.3f} > real={mean_real:.3f} "
                f"({len(fake)} fake / {len(real)} real)")
        assert ok


@e2e
class TestCriterion10Determinism:
    def test_tfl_rerun_identical(self, corpus, tfl_run):
        _, report_first, _ = tfl_run
        _, report_second, _ = run_tfl(corpus, q=15)
        ok = report_first == report_second
        verdict(10, ok, "tfl rerun metric report identical"
                if ok else "tfl rerun diverged")
        assert ok

    def test_dfd_rerun_identical(self, corpus, dfd_run):
        _, report_first, _ = dfd_run
        _, report_second, _ = run_dfd(corpus)
        ok = report_first == report_second
        verdict(10, ok, "dfd rerun metric report identical"
                if ok else "dfd rerun diverged")
        assert ok
