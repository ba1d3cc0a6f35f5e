"""Strict JSON run configuration shared by all CLI commands.

Every key must be present and no unknown key is accepted, so a config file
fully determines a run. ``config_hash`` is the SHA-256 of the canonical
(sorted, compact) JSON form.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ddm.exceptions import UsageError


class ConfigError(UsageError):
    pass


@dataclass(frozen=True)
class OperatorConfig:
    kind: str = "scattering"
    seed: int = 1
    noise_level: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    height: int = 16
    width: int = 16
    count: int = 2560
    train_fraction: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    T: int = 20
    width: int = 16
    time_dim: int = 32
    dropout: float = 0.1
    heads: str = "mean+logvar"
    beta_start: float = 1e-4
    beta_end: float = 0.5


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class UQConfig:
    S: int = 16
    H: int = 24
    P_paths: int = 8
    mode: str = "full"
    seed: int = 0
    n_images: int = 4


@dataclass(frozen=True)
class PathsConfig:
    workdir: str = "run"


@dataclass(frozen=True)
class RunConfig:
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    uq: UQConfig = field(default_factory=UQConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def workdir(self, base=None) -> Path:
        p = Path(self.paths.workdir)
        return p if p.is_absolute() or base is None else Path(base) / p


_CHOICES = {
    ("operator", "kind"): ("scattering", "shg", "identity"),
    ("model", "heads"): ("mean", "mean+logvar"),
    ("uq", "mode"): ("naive", "full"),
}


def _coerce(section: str, f: dataclasses.Field, value):
    where = f"{section}.{f.name}"
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    choices = _CHOICES.get((section, f.name))
    if choices and value not in choices:
        raise ConfigError(f"{where} must be one of {choices}, got {value!r}")
    return value


def _section(name: str, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    missing = sorted(set(fields) - set(raw))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    if missing:
        raise ConfigError(f"missing keys in {name!r}: {missing}")
    return cls(**{k: _coerce(name, fields[k], v) for k, v in raw.items()})


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    sections = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - set(sections))
    missing = sorted(set(sections) - set(raw))
    if unknown:
        raise ConfigError(f"unknown sections: {unknown}")
    if missing:
        raise ConfigError(f"missing sections: {missing}")
    cfg = RunConfig(**{k: _section(k, sections[k], raw[k]) for k in sections})
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: RunConfig):
    checks = [
        (cfg.data.height >= 8 and cfg.data.width >= 8, "data dims must be at least 8"),
        (cfg.data.count >= 2, "data.count must be at least 2"),
        (0 < cfg.data.train_fraction < 1, "data.train_fraction must lie in (0, 1)"),
        (cfg.model.T >= 1, "model.T must be positive"),
        (0 <= cfg.model.dropout < 1, "model.dropout must lie in [0, 1)"),
        (cfg.operator.noise_level >= 0, "operator.noise_level must be nonnegative"),
        (cfg.trainer.steps >= 1 and cfg.trainer.batch_size >= 1, "trainer sizes must be positive"),
        (cfg.uq.S >= 2 and cfg.uq.H >= 2, "uq.S and uq.H must be at least 2"),
        (cfg.uq.P_paths >= 1 and cfg.uq.n_images >= 1, "uq counts must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
