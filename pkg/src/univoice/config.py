"""JSON run configuration shared by the command-line tools."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .dsp import StftConfig
from .errors import ConfigError
from .inference import McemConfig
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "mcem": McemConfig,
    "synth": SynthConfig,
    "stft": StftConfig,
}


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    cleaned = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{section}] {name} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{section}] {name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{section}] {name} must be a number")
            value = float(value)
        elif isinstance(default, tuple):
            value = tuple(value)
        cleaned[name] = value
    try:
        return cls(**cleaned)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mcem: McemConfig = field(default_factory=McemConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    explicit_model_keys: frozenset = field(default_factory=frozenset, compare=False)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a JSON object")
            parts[name] = _build(section_cls, values, name)
        return cls(**parts, explicit_model_keys=frozenset(raw.get("model", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            values = {f.name: getattr(section, f.name) for f in fields(section)}
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            train=replace(self.train, seed=seed),
            mcem=replace(self.mcem, seed=seed),
            synth=replace(self.synth, seed=seed),
        )

    def model_for_data(self, freq_bins: int, lip_dim: int, id_dim: int) -> ModelConfig:
        """Model config with data-derived dimensions wherever the file left them unset."""
        inferred = {"freq_bins": freq_bins, "lip_dim": lip_dim, "id_dim": id_dim}
        updates = {}
        for key, value in inferred.items():
            if key in self.explicit_model_keys:
                if getattr(self.model, key) != value:
                    raise ConfigError(f"config sets {key}={getattr(self.model, key)} but the data has {value}")
            else:
                updates[key] = value
        return replace(self.model, **updates)
