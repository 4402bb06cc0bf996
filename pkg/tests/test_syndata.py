import numpy as np
import pytest

from avforge.intervals import AUDIO, VISUAL
from avforge.syndata import (
    BadMagicError,
    DimensionMismatchError,
    Sample,
    SyntheticConfig,
    TruncatedBlobError,
    VersionMismatchError,
    generate_dataset,
    generate_sample,
    read_dataset,
    write_dataset,
)

SMALL = SyntheticConfig(f=60, d0=8, latent_dim=4, min_len=6, max_len=15,
                        max_intervals=2, seed=11)


class TestConfig:
    def test_defaults_valid(self):
        SyntheticConfig()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"min_len": 0},
            {"min_len": 20, "max_len": 10},
            {"max_len": 200},
            {"p_fake": 1.5},
            {"noise_sigma": -0.1},
            {"modality_mix": (0.5, 0.5, 0.5)},
            {"f": 40, "max_intervals": 3, "max_len": 30, "min_len": 5},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticConfig(**kwargs)


class TestGeneration:
    def test_p_fake_zero_all_real(self):
        cfg = SyntheticConfig(f=50, d0=6, latent_dim=3, min_len=5, max_len=10,
                              p_fake=0.0, seed=1)
        for s in generate_dataset(cfg, 20):
            assert s.intervals == () and s.labels == (0, 0)

    def test_label_interval_consistency(self):
        for s in generate_dataset(SMALL, 60):
            assert s.label_visual == int(any(i.modality == VISUAL for i in s.intervals))
            assert s.label_audio == int(any(i.modality == AUDIO for i in s.intervals))

    def test_intervals_disjoint_within_modality(self):
        for s in generate_dataset(SMALL, 60):
            for mod in (VISUAL, AUDIO):
                spans = sorted(
                    (i.onset, i.offset) for i in s.intervals if i.modality == mod
                )
                for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                    assert e1 <= s2

    def test_noise_free_real_sample_is_low_rank(self):
        cfg = SyntheticConfig(f=50, d0=8, latent_dim=4, min_len=5, max_len=10,
                              noise_sigma=0.0, p_fake=0.0, seed=2)
        s = generate_sample(cfg, 0)
        stacked = np.hstack([s.visual, s.audio]).astype(np.float64)
        sv = np.linalg.svd(stacked, compute_uv=False)
        assert sv[cfg.latent_dim:].max() < 1e-4 * sv[0]

    def test_divergent_interval_decorrelates(self):
        cfg = SyntheticConfig(f=100, d0=10, latent_dim=5, min_len=25, max_len=40,
                              max_intervals=1, noise_sigma=0.05, p_fake=1.0,
                              modality_mix=(1.0, 0.0, 0.0), seed=3)
        fake_corrs, real_corrs = [], []
        for i in range(30):
            s = generate_sample(cfg, i)
            iv = s.intervals[0]
            lo, hi = int(iv.onset), int(iv.offset)
            inside = _top_cca(s.visual[lo:hi], s.audio[lo:hi])
            mask = np.ones(s.f, dtype=bool)
            mask[lo:hi] = False
            outside = _top_cca(s.visual[mask], s.audio[mask])
            fake_corrs.append(inside)
            real_corrs.append(outside)
        assert np.mean(fake_corrs) < np.mean(real_corrs)

    def test_byte_identical_regeneration(self):
        a = generate_dataset(SyntheticConfig(seed=42), 10)
        b = generate_dataset(SyntheticConfig(seed=42), 10)
        for x, y in zip(a, b):
            assert x.id == y.id and x.intervals == y.intervals
            assert x.visual.tobytes() == y.visual.tobytes()
            assert x.audio.tobytes() == y.audio.tobytes()

    def test_seed_changes_data(self):
        a = generate_sample(SyntheticConfig(seed=1), 0)
        b = generate_sample(SyntheticConfig(seed=2), 0)
        assert a.visual.tobytes() != b.visual.tobytes()


def _top_cca(x, y, ridge=1e-6):
    """Leading canonical correlation between two frame blocks."""
    x = x - x.mean(0)
    y = y - y.mean(0)
    cxx = x.T @ x / len(x) + ridge * np.eye(x.shape[1])
    cyy = y.T @ y / len(y) + ridge * np.eye(y.shape[1])
    cxy = x.T @ y / len(x)
    wx = np.linalg.inv(np.linalg.cholesky(cxx))
    wy = np.linalg.inv(np.linalg.cholesky(cyy))
    m = wx @ cxy @ wy.T
    return float(np.linalg.svd(m, compute_uv=False)[0])


class TestSampleInvariants:
    def test_rejects_mismatched_labels(self):
        with pytest.raises(ValueError):
            Sample(id="x", visual=np.zeros((10, 4), dtype=np.float32),
                   audio=np.zeros((10, 4), dtype=np.float32),
                   label_visual=1, label_audio=0, intervals=())

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            Sample(id="x", visual=np.zeros((10, 4), dtype=np.float32),
                   audio=np.zeros((9, 4), dtype=np.float32),
                   label_visual=0, label_audio=0)


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        samples = generate_dataset(SMALL, 12)
        write_dataset(samples, tmp_path)
        back = read_dataset(tmp_path)
        assert len(back) == len(samples)
        for a, b in zip(samples, back):
            assert a.id == b.id and a.labels == b.labels
            assert a.intervals == b.intervals
            assert a.visual.tobytes() == b.visual.tobytes()
            assert a.audio.tobytes() == b.audio.tobytes()

    def test_corrupt_magic(self, tmp_path):
        samples = generate_dataset(SMALL, 1)
        write_dataset(samples, tmp_path)
        blob = tmp_path / f"{samples[0].id}.dmf"
        raw = bytearray(blob.read_bytes())
        raw[:4] = b"NOPE"
        blob.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_dataset(tmp_path)

    def test_version_mismatch(self, tmp_path):
        samples = generate_dataset(SMALL, 1)
        write_dataset(samples, tmp_path)
        blob = tmp_path / f"{samples[0].id}.dmf"
        raw = bytearray(blob.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        blob.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_dataset(tmp_path)

    def test_truncated_blob(self, tmp_path):
        samples = generate_dataset(SMALL, 1)
        write_dataset(samples, tmp_path)
        blob = tmp_path / f"{samples[0].id}.dmf"
        blob.write_bytes(blob.read_bytes()[:-7])
        with pytest.raises(TruncatedBlobError):
            read_dataset(tmp_path)

    def test_dimension_mismatch(self, tmp_path):
        samples = generate_dataset(SMALL, 1)
        write_dataset(samples, tmp_path)
        manifest = tmp_path / "manifest.jsonl"
        text = manifest.read_text(encoding="utf-8").replace('"f": 60', '"f": 59')
        manifest.write_text(text, encoding="utf-8")
        with pytest.raises(DimensionMismatchError):
            read_dataset(tmp_path)
