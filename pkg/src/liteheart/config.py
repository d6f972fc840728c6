"""Run configuration: TOML files with LITEHEART_* environment overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .losses import KDConfig
from .signal_core import SplitSpec, SynthConfig
from .training import TrainConfig

ENV_PREFIX = "LITEHEART_"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSelection:
    student: str = "micro"
    restoration: str = "tiny"
    teacher: str = "tiny"
    lead_index: int = 0
    # stem strides of the student; empty keeps the tier's 64x stem
    student_strides: list[int] = field(default_factory=list)

    def __post_init__(self):
        from .models import CLASSIFIER_TIERS, RESTORATION_TIERS

        if self.student not in CLASSIFIER_TIERS or self.teacher not in CLASSIFIER_TIERS:
            raise ConfigError(f"unknown classifier tier in {self.student!r}/{self.teacher!r}")
        if self.restoration not in RESTORATION_TIERS:
            raise ConfigError(f"unknown restoration tier {self.restoration!r}")
        if not 0 <= self.lead_index < 12:
            raise ConfigError("lead_index must be in [0, 11]")
        if self.student_strides and (len(self.student_strides) != 3 or min(self.student_strides) < 1):
            raise ConfigError("student_strides must be three positive ints")


@dataclass
class DataPaths:
    dataset: str = ""
    pretrain_dataset: str = ""
    external_dataset: str = ""


@dataclass
class PretrainCorpus:
    n_records: int = 3000
    seed: int = 1000
    val_frac: float = 0.1


@dataclass
class RunConfig:
    out: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    data: DataPaths = field(default_factory=DataPaths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_corpus: PretrainCorpus = field(default_factory=PretrainCorpus)
    split: SplitSpec = field(default_factory=SplitSpec)
    models: ModelSelection = field(default_factory=ModelSelection)
    kd: KDConfig = field(default_factory=KDConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=64, max_epochs=30))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=30))
    restoration_finetune_epochs: int = 5
    sample_rate: float = 100.0
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = 0.5
    beta: float = 2.0

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED = {
    "data": DataPaths,
    "synth": SynthConfig,
    "pretrain_corpus": PretrainCorpus,
    "split": SplitSpec,
    "models": ModelSelection,
    "kd": KDConfig,
    "pretrain": TrainConfig,
    "finetune": TrainConfig,
    "train": TrainConfig,
}


def _nested_type(cls, name):
    return _NESTED.get(name) if cls is RunConfig else None


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_env_overrides(data: dict, environ=None) -> dict:
    """``LITEHEART_KD__TAU=2`` sets ``data['kd']['tau'] = 2``; values parse as TOML literals."""
    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(raw)
    return data


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    apply_env_overrides(data, environ)
    for dotted, value in (overrides or {}).items():
        node = data
        *head, last = dotted.split(".")
        for p in head:
            node = node.setdefault(p, {})
        node[last] = value
    return _build(RunConfig, data, "")


def reference_config_path() -> Path:
    return Path(str(resources.files("liteheart") / "configs" / "reference.toml"))
