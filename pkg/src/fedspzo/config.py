"""Experiment configuration: YAML in, validated dataclasses out.

Parsing is strict: unknown keys are rejected with their full field path, and
method-specific requirements (perturbation counts, divisibility) are checked
up front so a run can only start from a fully resolved configuration. The
resolved config is echoed into the output directory and re-parses to an
identical object.

Any key can be overridden from the environment: ``FEDSPZO_ROUNDS=50``,
nested fields with double underscores (``FEDSPZO_MODEL__PRECISION=32``);
values are parsed as YAML scalars.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .estimators import SplitConfig
from .models import ModelSpec, mlp_spec
from .protocol import MODE_SCALARS_ONLY, MODE_WITH_SEEDS, WholeZoConfig

ENV_PREFIX = "FEDSPZO_"

METHODS = ("fedspzo", "central_zo", "forward_zo", "fedavg_fo")


@dataclass(frozen=True)
class FirstOrderConfig:
    """Backprop baseline has no estimator knobs beyond the learning rate."""

    mu: float


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    cut: int | str | None = "auto"
    precision: int = 64


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    n: int = 2000
    dim: int = 32
    num_classes: int = 4
    spread: float = 1.0
    seed: int = 0
    path: str | None = None
    label_column: str = "label"
    standardize: bool = True
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "iid"
    alpha: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    rounds: int
    n_clients: int
    mu: float
    eps: float = 1e-3
    master_seed: int = 0
    sample_fraction: float = 0.1
    local_steps: int = 20
    p: int | None = None
    p1: int | None = None
    p2: int | None = None
    batch_size: int = 8
    payload_mode: str = MODE_WITH_SEEDS
    eval_every: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds: must be >= 1, got {self.rounds}")
        if self.n_clients < 1:
            raise ConfigError(f"n_clients: must be >= 1, got {self.n_clients}")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError(f"sample_fraction: must be in (0, 1], got {self.sample_fraction}")
        if self.local_steps < 0:
            raise ConfigError(f"local_steps: must be >= 0, got {self.local_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every: must be >= 1, got {self.eval_every}")
        if self.payload_mode not in (MODE_WITH_SEEDS, MODE_SCALARS_ONLY):
            raise ConfigError(f"payload_mode: expected with_seeds or scalars_only, "
                              f"got {self.payload_mode!r}")
        if not self.mu > 0:
            raise ConfigError(f"mu: must be positive, got {self.mu}")
        if self.method != "fedavg_fo" and not self.eps > 0:
            raise ConfigError(f"eps: must be positive, got {self.eps}")
        if self.method == "fedspzo":
            if self.p1 is None or self.p2 is None:
                raise ConfigError("method fedspzo requires p1 and p2")
            if self.p1 < 1 or self.p2 < 2 * self.p1 or self.p2 % (2 * self.p1) != 0:
                raise ConfigError(
                    f"p2: must equal 2*p1*ps for an integer ps >= 1 (p1={self.p1}, p2={self.p2})")
        elif self.method in ("central_zo", "forward_zo"):
            if self.p is None or self.p < 1:
                raise ConfigError(f"method {self.method} requires p >= 1, got {self.p}")
        if self.data.source not in ("blobs", "csv"):
            raise ConfigError(f"data.source: expected blobs or csv, got {self.data.source!r}")
        if self.data.source == "csv" and not self.data.path:
            raise ConfigError("data.path: required when data.source is csv")
        if self.model.precision not in (32, 64):
            raise ConfigError(f"model.precision: must be 32 or 64, got {self.model.precision}")
        if self.partition.scheme not in ("iid", "dirichlet"):
            raise ConfigError(f"partition.scheme: expected iid or dirichlet, "
                              f"got {self.partition.scheme!r}")

    @property
    def ps(self) -> int | None:
        if self.method != "fedspzo":
            return None
        return self.p2 // (2 * self.p1)

    @property
    def num_sampled(self) -> int:
        return max(1, int(math.floor(self.sample_fraction * self.n_clients + 0.5)))

    def method_config(self):
        if self.method == "fedspzo":
            return SplitConfig(p1=self.p1, p2=self.p2, eps=self.eps, mu=self.mu)
        if self.method == "central_zo":
            return WholeZoConfig(p=self.p, eps=self.eps, mu=self.mu, kind="central")
        if self.method == "forward_zo":
            return WholeZoConfig(p=self.p, eps=self.eps, mu=self.mu, kind="forward")
        return FirstOrderConfig(mu=self.mu)

    def build_model_spec(self, feature_dim: int, num_classes: int) -> ModelSpec:
        return mlp_spec(feature_dim, self.model.hidden, num_classes,
                        activation=self.model.activation, cut=self.model.cut,
                        precision=self.model.precision)

    def task_fingerprint(self) -> str:
        """Hash of everything that defines the task (not the method tuning)."""
        basis = {
            "data": _dataclass_dict(self.data),
            "partition": _dataclass_dict(self.partition),
            "model": _dataclass_dict(self.model),
            "master_seed": self.master_seed,
            "n_clients": self.n_clients,
            "sample_fraction": self.sample_fraction,
            "local_steps": self.local_steps,
            "batch_size": self.batch_size,
        }
        blob = json.dumps(basis, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "rounds": self.rounds,
            "n_clients": self.n_clients,
            "mu": self.mu,
            "eps": self.eps,
            "master_seed": self.master_seed,
            "sample_fraction": self.sample_fraction,
            "local_steps": self.local_steps,
            "p": self.p,
            "p1": self.p1,
            "p2": self.p2,
            "batch_size": self.batch_size,
            "payload_mode": self.payload_mode,
            "eval_every": self.eval_every,
            "model": _dataclass_dict(self.model),
            "data": _dataclass_dict(self.data),
            "partition": _dataclass_dict(self.partition),
        }
        return out


def _dataclass_dict(obj) -> dict:
    out = {}
    for name in obj.__dataclass_fields__:
        v = getattr(obj, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    return out


_SECTION_TYPES = {"model": ModelConfig, "data": DataConfig, "partition": PartitionConfig}


def _build_section(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    fields = cls.__dataclass_fields__
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path}.{key}")
        if key == "hidden":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.hidden: expected a list of layer widths")
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = ExperimentConfig.__dataclass_fields__
    kwargs = {}
    for key, value in raw.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key}")
        if key in _SECTION_TYPES:
            value = _build_section(_SECTION_TYPES[key], value, key)
        kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def apply_env_overrides(raw: dict, env=None) -> dict:
    """Overlay FEDSPZO_* environment variables onto a raw config mapping."""
    env = os.environ if env is None else env
    out = json.loads(json.dumps(raw))  # deep copy, plain types only
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(env[name])
        node = out
        for part in path[:-1]:
            if part not in _SECTION_TYPES and part not in node:
                raise ConfigError(f"unknown config key {'.'.join(path)} (from {name})")
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name}: {part} is not a section")
        node[path[-1]] = value
    return out


def load_config(path, env=None) -> ExperimentConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raise ConfigError(f"{path}: empty config file")
    return config_from_dict(apply_env_overrides(raw, env))


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
