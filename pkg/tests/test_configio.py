import pytest

from avforge.configio import (
    ConfigError,
    load_generate_config,
    load_train_config,
    parse_kv,
)


class TestParseKv:
    def test_basic(self):
        raw = parse_kv("a = 1\nb=two\n# comment\n\nc = 3 # trailing\n")
        assert raw == {"a": "1", "b": "two", "c": "3"}

    def test_rejects_bare_line(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_kv("not a pair\n")

    def test_rejects_duplicate(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_kv("a=1\na=2\n")


class TestTrainConfig:
    def test_full_round(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text(
            "task=tfl\nd=32\nr=2\nu=1\nl=3\nq=15\nf_max=600\nlr=0.001\n"
            "batch=16\nepochs=100\npatience=10\nalpha=0.98\ngamma=2\nseed=42\n",
            encoding="utf-8",
        )
        model_cfg, train_cfg = load_train_config(path, d0=16)
        assert model_cfg.d == 32 and model_cfg.q == 15 and model_cfg.d0 == 16
        assert train_cfg.batch_size == 16 and train_cfg.alpha == 0.98
        assert train_cfg.seed == 42

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("width=32\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="unknown config key"):
            load_train_config(path, d0=8)

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("d=thirty\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="bad value"):
            load_train_config(path, d0=8)

    def test_semantic_validation_propagates(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("d=9\nr=2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_train_config(path, d0=8)

    def test_attention_residual_bool(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("attention_residual=false\n", encoding="utf-8")
        model_cfg, _ = load_train_config(path, d0=8)
        assert model_cfg.attention_residual is False


class TestGenerateConfig:
    def test_counts_and_mix(self, tmp_path):
        path = tmp_path / "g.cfg"
        path.write_text(
            "f=60\nd0=8\nlatent_dim=4\nmin_len=6\nmax_len=12\nseed=7\n"
            "mix_visual=0.5\nmix_audio=0.25\nmix_both=0.25\nn_train=10\nn_val=4\n",
            encoding="utf-8",
        )
        cfg, counts = load_generate_config(path)
        assert cfg.modality_mix == (0.5, 0.25, 0.25)
        assert counts == {"train": 10, "val": 4, "test": 0}

    def test_requires_counts(self, tmp_path):
        path = tmp_path / "g.cfg"
        path.write_text("f=60\nd0=8\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="n_train"):
            load_generate_config(path)
