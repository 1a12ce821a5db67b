"""Training configuration and its JSON loader."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, IoError

REGULARIZERS = ("beta_vae", "beta_tcvae")
DATASETS = ("gmm2d", "factors-lite", "file")


@dataclass
class TrainConfig:
    beta: float = 4.0
    regularizer: str = "beta_vae"
    sigma_x0: float = 1.0
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 256
    steps: int = 2000
    ema_decay: float = 0.9999
    n_mc_kl: int = 1
    seed: int = 0
    d_z: int = 1
    d_eps: int = 1
    D: int = 2
    K: int = 5
    dataset_size: int = 20000
    # architecture
    hidden: tuple[int, ...] = (128, 128, 128)
    var_hidden: tuple[int, ...] = (32,)
    dec_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    mean_skip: bool = True
    # loss multipliers on top of the unweighted objective
    vfm_weight: float = 1.0
    endpoint_weight: float = 1.0
    # data source
    dataset: str = "gmm2d"
    data_path: str | None = None
    gmm2d_k: int = 5
    gmm2d_separation: float = 6.0
    log_every: int = 50

    def __post_init__(self):
        self.validate()

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_z, self.d_eps, self.D)

    def validate(self):
        if self.d_z + self.d_eps != self.D:
            raise ConfigError(f"d_z + d_eps must equal D ({self.d_z} + {self.d_eps} != {self.D})")
        if self.beta <= 0 or self.sigma_x0 <= 0 or self.lr <= 0:
            raise ConfigError("beta, sigma_x0 and lr must be positive")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.dataset == "file" and not self.data_path:
            raise ConfigError("dataset 'file' needs data_path")
        if min(self.batch_size, self.n_mc_kl, self.K, self.d_z) < 1 or self.steps < 0:
            raise ConfigError("counts must be positive")
        if self.activation not in ("tanh", "softplus"):
            raise ConfigError("activation must be 'tanh' or 'softplus'")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value, default):
    def bad():
        return ConfigError(f"config key {name!r}: expected {type(default).__name__}, got {value!r}")

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad()
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if isinstance(default, str) or (default is None and name == "data_path"):
        if value is not None and not isinstance(value, str):
            raise bad()
        if value is None and default is not None:
            raise bad()
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise bad()
        kind = type(default[0])
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise bad()
            if kind is int and not isinstance(v, int):
                raise bad()
            out.append(kind(v))
        return tuple(out)
    raise bad()


def config_from_dict(obj: dict) -> TrainConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    defaults = TrainConfig()
    values = {}
    for key, value in obj.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, getattr(defaults, key))
    if "adam_betas" in values and len(values["adam_betas"]) != 2:
        raise ConfigError("adam_betas must have two entries")
    return TrainConfig(**values)


def config_load(path) -> TrainConfig:
    """Load a JSON config; missing keys take defaults, unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj)
