"""Run configuration and deterministic RNG stream derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REGIMES = ("centralized", "localized", "static_fed", "static_fed_reinit", "fcm")
MODEL_KINDS = ("opaq", "cbm", "cem", "cgm", "c2bm")


class ConfigError(ValueError):
    """Invalid configuration value or file (CLI exit code 2)."""


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent, reproducible RNG stream named by (seed, *tags).

    Tags are hashed with sha256 so the stream does not depend on Python's
    salted hash(); identical (seed, tags) yield bitwise-identical streams.
    """
    digest = hashlib.sha256(repr(tags).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


@dataclass
class DPConfig:
    enabled: bool = False
    clip: float = 1.0
    sigma: float = 0.0


@dataclass
class GraphConfig:
    memory: str = "cumulative"  # or "round_only"
    perturb_p: float = 0.3
    perturb_rate: float = 0.3


@dataclass
class RunConfig:
    """Everything a `train` invocation needs; JSON keys match field names."""

    dataset: str = "asia"
    n_samples: int = 0  # 0 = dataset default sample count
    latent_dim: int = 0  # 0 = dataset default latent width
    noise_mix: float = 0.5
    n_clients: int = 20
    participants_per_round: int = 10
    join_round: int = 10
    rounds: int = 200
    local_epochs: int = 2
    gamma: float = 0.8
    lr: float = 1e-3
    batch_size: int = 512
    hidden_dim: int = 32
    embedding_dim: int = 16
    patience: int = 10
    task_drop_rate: float = 0.3
    extra_anchor_nodes: int = 2
    late_client_frac: float = 0.5
    late_concept_frac: float = 0.35
    train_intervention_p: float = 0.25
    regime: str = "fcm"
    model_kind: str = "cbm"
    dp: DPConfig = field(default_factory=DPConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}, expected one of {MODEL_KINDS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.noise_mix <= 1.0:
            raise ConfigError("noise_mix must lie in [0, 1]")
        if self.graph.memory not in ("cumulative", "round_only"):
            raise ConfigError("graph.memory must be 'cumulative' or 'round_only'")
        if self.n_clients < 1 or self.participants_per_round < 1:
            raise ConfigError("n_clients and participants_per_round must be >= 1")
        if self.dp.clip <= 0 or self.dp.sigma < 0:
            raise ConfigError("dp.clip must be > 0 and dp.sigma >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dp" in raw and isinstance(raw["dp"], dict):
            raw["dp"] = DPConfig(**raw["dp"])
        if "graph" in raw and isinstance(raw["graph"], dict):
            raw["graph"] = GraphConfig(**raw["graph"])
        return cls(**raw).validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config file and apply flat CLI overrides on top.

    Override keys use dots for the nested sections (e.g. "dp.sigma").
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise ConfigError(f"config key {section} is not a section")
            raw[section][sub] = value
        else:
            raw[key] = value
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
