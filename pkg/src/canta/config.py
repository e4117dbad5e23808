"""Run configuration: file loading (TOML or JSON), override merging, and
resolved-config snapshots written next to run outputs.

A config file has optional sections mapping straight onto the dataclasses:

    [features]   sample_rate, hop_ms, win_ms, n_bands, fmin_hz, fmax_hz, log_floor
    [model]      embedding_dim, encoder_channels, ..., acoustic_encoder
    [train]      batch_size, base_lr, warmup_steps, max_steps, seed, ...
    [corpus]     n_singers, songs_per_singer, target_songs, song_seconds, ...

plus a top-level ``model_scale`` that multiplies all model channel widths.
Overrides use dotted keys, e.g. ``train.max_steps=500``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .dsp import FeatureConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class CorpusConfig:
    n_singers: int = 5
    songs_per_singer: int = 10
    val_songs: int = 1
    target_songs: int = 16
    song_seconds: tuple = (10.0, 16.0)
    clone_seconds: float = 180.0
    seed: int = 0
    train_augment_semitones: tuple = (-4, -2, 2, 4)
    val_augment_semitones: tuple = (-2, 2)


@dataclass
class Resolved:
    features: FeatureConfig
    model: ModelConfig
    train: TrainConfig
    corpus: CorpusConfig
    model_scale: float = 1.0

    def snapshot(self) -> dict:
        out = {
            "features": asdict(self.features),
            "model": _tuples_to_lists(asdict(self.model)),
            "train": _tuples_to_lists(asdict(self.train)),
            "corpus": _tuples_to_lists(asdict(self.corpus)),
            "model_scale": self.model_scale,
        }
        return out


def _tuples_to_lists(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config_file(path) -> dict:
    """Parse a .toml or .json config file into a plain dict."""
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        return json.loads(text.decode("utf-8"))
    try:
        return tomllib.loads(text.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ValueError(f"{path}: cannot parse config file: {exc}") from exc


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    if "," in value:
        return [_coerce(v) for v in value.split(",")]
    return value


def parse_override(text: str) -> tuple[str, object]:
    """'section.key=value' (or a top-level key like model_scale) -> (key, value)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), _coerce(value.strip())


def apply_overrides(data: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(data))
    for dotted, value in (overrides or {}).items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _build(cls, section: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown {label} config keys: {sorted(unknown)}")
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in section.items()
    }
    return cls(**kwargs)


def resolve(data: dict | None = None, overrides: dict | None = None) -> Resolved:
    """Merge config data and overrides into the four config dataclasses."""
    data = apply_overrides(data or {}, overrides or {})
    known = {"features", "model", "train", "corpus", "model_scale"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    features = _build(FeatureConfig, data.get("features", {}), "features")
    model = _build(ModelConfig, data.get("model", {}), "model")
    train = _build(TrainConfig, data.get("train", {}), "train")
    corpus = _build(CorpusConfig, data.get("corpus", {}), "corpus")
    scale = float(data.get("model_scale", 1.0))
    if scale != 1.0:
        model = model.scaled(scale)
    return Resolved(features=features, model=model, train=train, corpus=corpus, model_scale=scale)


def write_snapshot(resolved: Resolved, path):
    with open(path, "w") as f:
        json.dump(resolved.snapshot(), f, indent=2, sort_keys=True)
        f.write("\n")
