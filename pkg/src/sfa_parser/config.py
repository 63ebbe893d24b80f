"""Model and training configuration.

Config files are flat ``key = value`` TOML.  Any field can be overridden
from the environment as ``SFA_<FIELD>`` (upper case), e.g. ``SFA_LR=5e-4``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ENV_PREFIX = "SFA_"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # encoder widths
    word_dim: int = 100
    pos_dim: int = 100
    lemma_dim: int = 100
    char_dim: int = 50
    lstm_hidden: int = 400
    lstm_layers: int = 3
    repr_dim: int = 600
    external_vectors: str = ""

    # scorers: scorer is "sfa" or "biaffine"; the sfa_* switches drop the
    # attention masks while keeping the rest of the scorer
    scorer: str = "sfa"
    sfa_first_order: bool = True
    heads: int = 4
    window: int = 3
    biaffine_bias: bool = True
    second_order: bool = False
    sfa_second_order: bool = True
    rank: int = 150
    mfvi_iterations: int = 3
    head_rule: str = "final"

    # optimisation
    lr: float = 1e-3
    decay: float = 0.75
    decay_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-12
    dropout: float = 0.33
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 20
    threshold: float = 0.5
    seed: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "decay", "beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        for name in ("heads", "window", "rank", "batch_size", "decay_steps", "lstm_layers", "repr_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mfvi_iterations < 0:
            raise ConfigError(f"mfvi_iterations must be >= 0, got {self.mfvi_iterations}")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.scorer not in ("sfa", "biaffine"):
            raise ConfigError(f"scorer must be 'sfa' or 'biaffine', got {self.scorer!r}")
        if self.head_rule not in ("final", "first"):
            raise ConfigError(f"head_rule must be 'final' or 'first', got {self.head_rule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _coerce(known[k], v) for k, v in data.items()})


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{f.name}: cannot read {value!r} as a boolean")
        return bool(value)
    try:
        return {"int": int, "float": float, "str": str}[kind](value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot read {value!r} as {kind}") from None


def load_config(path=None, env=None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``SFA_*`` environment overrides."""
    data: dict = {}
    if path is not None:
        with open(Path(path), "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as err:
                raise ConfigError(f"{path}: {err}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    env = os.environ if env is None else env
    for f in fields(TrainConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in env:
            data[f.name] = env[key]
    return TrainConfig.from_dict(data)
