"""Layered run configuration: defaults, optional JSON file, dotted overrides.

The merged configuration is a plain nested dict so it serializes into run
manifests unchanged. Section constructors hand the validated pieces to the
dataclass configs the modules use.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

from .grammar import GrammarConfig
from .model import ModelConfig
from .sampling import SampleConfig, StoryConfig
from .tokenizer import TokenizerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "grammar": GrammarConfig().to_dict(),
        "tokenizer": TokenizerConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": {k: getattr(TrainConfig(), k) for k in TrainConfig.__dataclass_fields__},
        "sample": SampleConfig().to_dict(),
        "story": {k: getattr(StoryConfig(), k) for k in StoryConfig.__dataclass_fields__},
        "corpus": {"n_songs": 64, "seed": 612},
        "tokenizer_train": {"steps": 300, "lr": 0.02, "batch_frames": 256, "dead_steps": 100},
        "eval": {"prompt_seconds": 2.0, "max_songs": 32, "seed": 99, "rescore_lambda": 25},
    }


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} expects a section, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"--set has an empty path component: {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings pass through unquoted
    return parts, value


def apply_overrides(cfg: dict, sets: list[str]) -> None:
    for item in sets:
        parts, value = _parse_set(item)
        node = cfg
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section: {'.'.join(parts)}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key: {'.'.join(parts)}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{'.'.join(parts)} is a section, not a value")
        node[leaf] = value


def load_config(path: Optional[str] = None, sets: Optional[list[str]] = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, loaded)
    if sets:
        apply_overrides(cfg, sets)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    tok = tokenizer_config(cfg)
    mdl = model_config(cfg)
    gram = grammar_config(cfg)
    if mdl.codebook_size != tok.codebook_size:
        raise ConfigError(
            f"model.codebook_size ({mdl.codebook_size}) != tokenizer.codebook_size ({tok.codebook_size})"
        )
    if mdl.k_streams != tok.k_streams:
        raise ConfigError(
            f"model.k_streams ({mdl.k_streams}) != tokenizer streams ({tok.k_streams})"
        )
    if mdl.syllable_vocab != gram.syllable_vocab:
        raise ConfigError(
            f"model.syllable_vocab ({mdl.syllable_vocab}) != grammar.syllable_vocab ({gram.syllable_vocab})"
        )
    if tok.feature_dim != gram.feature_dim:
        raise ConfigError(
            f"tokenizer.feature_dim ({tok.feature_dim}) != grammar.feature_dim ({gram.feature_dim})"
        )
    for key, lo in (("corpus.n_songs", 1), ("tokenizer_train.steps", 0)):
        sect, leaf = key.split(".")
        v = cfg[sect][leaf]
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"{key} must be an integer, got {v!r}")
        if v < lo:
            raise ConfigError(f"{key} must be >= {lo}")


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def grammar_config(cfg: dict) -> GrammarConfig:
    return GrammarConfig.from_dict(cfg["grammar"])


def tokenizer_config(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(**cfg["tokenizer"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def sample_config(cfg: dict) -> SampleConfig:
    return SampleConfig.from_dict(cfg["sample"])


def story_config(cfg: dict) -> StoryConfig:
    return StoryConfig(**cfg["story"])
