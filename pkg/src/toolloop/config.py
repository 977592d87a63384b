"""File-based run configuration (YAML or JSON). Secrets come from the environment only."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .agent import EpisodeConfig
from .backends import SamplingParams
from .rewards import RewardSpec


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    kind: str = "scripted"          # http | scripted | simulated
    fixtures: str | None = None
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "TOOLLOOP_API_KEY"
    aux_base_url: str | None = None
    aux_model: str | None = None
    aux_api_key_env: str = "TOOLLOOP_AUX_API_KEY"
    context_window: int | None = None


@dataclass
class EmbedderConfig:
    kind: str = "hashing"           # hashing | remote
    dimension: int = 128
    seed: int = 0
    base_url: str | None = None
    model: str | None = None


@dataclass
class EvalConfig:
    workers: int = 4
    modes: list[str] = field(default_factory=lambda: ["open_set"])


@dataclass
class RunConfig:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        if k == "sampling" and cls is EpisodeConfig:
            kwargs[k] = _build(SamplingParams, v, f"{where}.sampling")
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


_SECTIONS = {"episode": EpisodeConfig, "reward": RewardSpec, "backend": BackendConfig,
             "embedder": EmbedderConfig, "eval": EvalConfig}


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    cfg = RunConfig(**{k: _build(cls, data.get(k), k) for k, cls in _SECTIONS.items()})
    if cfg.backend.kind not in ("http", "scripted", "simulated"):
        raise ConfigError("backend.kind must be http, scripted or simulated")
    if cfg.embedder.kind not in ("hashing", "remote"):
        raise ConfigError("embedder.kind must be hashing or remote")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_dict(yaml.safe_load(Path(path).read_text()))
