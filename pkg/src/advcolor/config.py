"""Run configuration: a schema-versioned JSON file, strictly validated.

Unknown fields anywhere in the document are rejected so typos cannot
silently change a run.  Every run carries an explicit seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError

SCHEMA_VERSION = 1


@dataclass
class DatasetConfig:
    dir: str = "dataset"
    n_train: int = 2000
    n_val: int = 500
    image_size: int = 32


@dataclass
class ModelsConfig:
    dir: str = "models"
    source_architecture: str = "small"
    transfer_architecture: str = "deep"
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9


@dataclass
class AttackBlock:
    name: str = ""
    mode: str = "untargeted"
    kappa: object = 0.0  # float or {"percentile": p}
    budgets: list | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ConfigError(f"attack mode must be targeted|untargeted, got {self.mode!r}")
        if isinstance(self.kappa, dict):
            extra = set(self.kappa) - {"percentile"}
            if extra:
                raise ConfigError(f"unknown kappa fields: {sorted(extra)}")
            if "percentile" not in self.kappa:
                raise ConfigError("kappa dict needs a 'percentile' entry")
        elif not isinstance(self.kappa, (int, float)):
            raise ConfigError("kappa must be a number or {'percentile': p}")

    @property
    def targeted(self) -> bool:
        return self.mode == "targeted"

    def kappa_tag(self) -> str:
        if isinstance(self.kappa, dict):
            return f"kp{self.kappa['percentile']:g}"
        return f"k{float(self.kappa):g}"


@dataclass
class EvaluationConfig:
    bit_depths: list = field(default_factory=lambda: [7, 6, 5, 4, 3])
    jpeg_qualities: list = field(default_factory=lambda: [90, 70, 50, 30, 10])
    amplification: float = 10.0
    contact_sheets: int = 8


@dataclass
class RunConfig:
    seed: int
    schema_version: int = SCHEMA_VERSION
    output_dir: str = "out"
    suite_size: int = 100
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    attacks: list = field(default_factory=list)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {self.schema_version};"
                f" this build reads version {SCHEMA_VERSION}"
            )

    # path helpers ----------------------------------------------------------

    def dataset_dir(self) -> Path:
        return Path(self.dataset.dir)

    def models_dir(self) -> Path:
        return Path(self.models.dir)

    def out_dir(self) -> Path:
        return Path(self.output_dir)

    def source_checkpoint(self) -> Path:
        return self.models_dir() / "source.npz"

    def transfer_checkpoint(self) -> Path:
        return self.models_dir() / "transfer.npz"

    def snapshot(self) -> dict:
        """JSON-safe copy of the configuration for report embedding."""
        return json.loads(json.dumps(dataclasses.asdict(self), sort_keys=True))


def _build(dc_cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(dc_cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    nested = {
        "dataset": DatasetConfig,
        "models": ModelsConfig,
        "evaluation": EvaluationConfig,
    }
    for key, value in data.items():
        if dc_cls is RunConfig and key in nested:
            kwargs[key] = _build(nested[key], value, f"{path}.{key}")
        elif dc_cls is RunConfig and key == "attacks":
            if not isinstance(value, list):
                raise ConfigError(f"{path}.attacks: expected a list")
            kwargs[key] = [
                _build(AttackBlock, item, f"{path}.attacks[{i}]")
                for i, item in enumerate(value)
            ]
        else:
            kwargs[key] = value
    try:
        return dc_cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    if not isinstance(cfg.seed, int):
        raise ConfigError("config.seed must be an integer (no silent nondeterminism)")
    for i, block in enumerate(cfg.attacks):
        if not block.name:
            raise ConfigError(f"config.attacks[{i}]: missing attack name")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(data)
