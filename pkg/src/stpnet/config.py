"""Versioned JSON run configuration.

Schema (version 1)::

    {
      "version": 1,
      "model": {StpnetConfig fields},
      "train": {TrainConfig fields},
      "data":  {"seed": int, "n_train": int, "n_val": int, "n_test": int}
    }

Every section and key is optional; missing keys take their defaults.
Unknown keys are rejected so typos do not pass silently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .blocks import StpnetConfig
from .errors import InvalidArgumentError, VersionError
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128


@dataclass(frozen=True)
class RunConfig:
    model: StpnetConfig = field(default_factory=StpnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise VersionError(f"config version {version}, expected {CONFIG_VERSION}")
        unknown = set(d) - {"version", "model", "train", "data"}
        if unknown:
            raise InvalidArgumentError(f"unknown config sections: {sorted(unknown)}")
        sections = {"model": StpnetConfig, "train": TrainConfig, "data": DataConfig}
        for name, typ in sections.items():
            bad = set(d.get(name, {})) - {f.name for f in fields(typ)}
            if bad:
                raise InvalidArgumentError(f"unknown keys in [{name}]: {sorted(bad)}")
        data = DataConfig(**d.get("data", {}))
        return cls(StpnetConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {})), data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives data, initialization and shuffling."""
        return replace(
            self,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            data=replace(self.data, seed=seed),
        )
