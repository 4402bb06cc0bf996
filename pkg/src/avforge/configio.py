"""Flat key=value config files for the CLI.

One ``key = value`` pair per line; ``#`` starts a comment. Keys are typed
against a fixed schema and unknown keys are rejected, so a typo fails
loudly instead of silently training with a default.
"""

from __future__ import annotations

from pathlib import Path

from .model import ModelConfig
from .syndata import SyntheticConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(raw: dict[str, str], schema: dict[str, type]) -> dict:
    typed: dict = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        kind = schema[key]
        try:
            if kind is bool:
                typed[key] = _parse_bool(value)
            else:
                typed[key] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return typed


TRAIN_SCHEMA: dict[str, type] = {
    # model
    "d": int,
    "r": int,
    "u": int,
    "l": int,
    "q": int,
    "f_max": int,
    "task": str,
    "attention_residual": bool,
    # optimization
    "lr": float,
    "batch": int,
    "epochs": int,
    "patience": int,
    "alpha": float,
    "gamma": float,
    "seed": int,
    "plateau_factor": float,
    "plateau_patience": int,
    "decode_threshold": float,
    "nms_iou": float,
    "max_proposals": int,
    "level_aggregate": str,
}

GENERATE_SCHEMA: dict[str, type] = {
    "f": int,
    "d0": int,
    "latent_dim": int,
    "noise_sigma": float,
    "p_fake": float,
    "min_len": int,
    "max_len": int,
    "max_intervals": int,
    "mix_visual": float,
    "mix_audio": float,
    "mix_both": float,
    "seed": int,
    "n_train": int,
    "n_val": int,
    "n_test": int,
}

_MODEL_KEYS = ("d", "r", "u", "l", "q", "f_max", "task", "attention_residual")
_TRAIN_KEY_MAP = {
    "task": "task",
    "lr": "lr",
    "batch": "batch_size",
    "epochs": "epochs",
    "patience": "patience",
    "alpha": "alpha",
    "gamma": "gamma",
    "seed": "seed",
    "plateau_factor": "plateau_factor",
    "plateau_patience": "plateau_patience",
    "decode_threshold": "decode_threshold",
    "nms_iou": "nms_iou",
    "max_proposals": "max_proposals",
    "level_aggregate": "level_aggregate",
}


def load_train_config(path: str | Path, d0: int) -> tuple[ModelConfig, TrainConfig]:
    """Parse a training config; ``d0`` comes from the dataset, not the file."""
    typed = _coerce(parse_kv(Path(path).read_text(encoding="utf-8")), TRAIN_SCHEMA)
    model_kwargs = {k: typed[k] for k in _MODEL_KEYS if k in typed}
    model_kwargs["d0"] = d0
    train_kwargs = {
        dest: typed[src] for src, dest in _TRAIN_KEY_MAP.items() if src in typed
    }
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_generate_config(path: str | Path) -> tuple[SyntheticConfig, dict[str, int]]:
    """Parse a generation config into (SyntheticConfig, split counts)."""
    typed = _coerce(parse_kv(Path(path).read_text(encoding="utf-8")), GENERATE_SCHEMA)
    counts = {
        "train": typed.pop("n_train", 0),
        "val": typed.pop("n_val", 0),
        "test": typed.pop("n_test", 0),
    }
    if counts["train"] + counts["val"] + counts["test"] <= 0:
        raise ConfigError("need at least one of n_train/n_val/n_test > 0")
    mix = (
        typed.pop("mix_visual", 1 / 3),
        typed.pop("mix_audio", 1 / 3),
        typed.pop("mix_both", 1 / 3),
    )
    try:
        return SyntheticConfig(modality_mix=mix, **typed), counts
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
