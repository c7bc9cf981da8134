"""Run configuration: nested dataclasses, YAML files and dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .envs import EnvConfig


class ConfigError(ValueError):
    pass


ALGORITHMS = ("slac", "sac")
INPUT_KINDS = ("latent", "history", "state")
VARIANTS = ("factored", "unfactored", "vae")


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0
    algorithm: str = "slac"
    # all step counts below are simulator steps (agent steps x action repeat)
    total_env_steps: int = 100_000
    pretrain_random_steps: int = 10_000
    pretrain_iters: int = 5000
    random_policy_scale: float = 1.0
    grad_steps_per_env_step: float = 1.0
    batch_size_model: int = 32
    batch_size_rl: int = 256
    lr_model: float = 1e-4
    lr_rl: float = 3e-4
    gamma: float = 0.99
    ema_rate: float = 0.005
    tau: int = 8
    decoder_var: float = 0.1
    latent1_dim: int = 8
    latent2_dim: int = 32
    hidden: int = 64
    rl_hidden: int = 64
    feature_dim: int = 32
    variant: str = "factored"
    reward_head: bool = True
    critic_input: str = "latent"
    actor_input: str = "history"
    policy_std_scale: float = 1.0
    target_entropy: float | None = None
    replay_capacity: int = 100_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    eval_stochastic: bool = True
    log_every: int = 100
    checkpoint_every: int = 0
    paper_preset: bool = False

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("critic_input", "actor_input"):
            if getattr(self, name) not in INPUT_KINDS:
                raise ConfigError(f"{name} must be one of {INPUT_KINDS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.algorithm == "sac" and (self.critic_input != "state" or self.actor_input != "state"):
            raise ConfigError("sac runs on raw state: set critic_input=state and actor_input=state")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        for name in ("batch_size_model", "batch_size_rl", "lr_model", "lr_rl", "decoder_var", "hidden",
                     "rl_hidden", "feature_dim", "latent1_dim", "latent2_dim", "replay_capacity",
                     "eval_episodes", "log_every", "random_policy_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("total_env_steps", "pretrain_random_steps", "pretrain_iters", "grad_steps_per_env_step",
                     "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0 < self.ema_rate <= 1:
            raise ConfigError("ema_rate must lie in (0, 1]")
        return self

    def resolved(self) -> "TrainConfig":
        """Copy with the paper-scale preset applied (if requested)."""
        cfg = dataclasses.replace(self, env=dataclasses.replace(self.env))
        if cfg.paper_preset:
            cfg.latent1_dim, cfg.latent2_dim = 32, 256
            cfg.hidden = cfg.rl_hidden = 256
            cfg.pretrain_iters = max(cfg.pretrain_iters, 50_000)
        return cfg.validate()

    @property
    def default_target_entropy(self) -> float:
        return -1.0 if self.target_entropy is None else float(self.target_entropy)


def to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


_SCALAR_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "float | None": float}


def _coerce(name: str, annotation: str, value):
    """Cast a parsed value to the field's declared scalar type.

    YAML reads ``1e-3`` as a string, so numeric strings are accepted for
    numeric fields; anything else that does not fit is an error.
    """
    kind = _SCALAR_TYPES.get(annotation)
    if kind is None or value is None and annotation.endswith("None"):
        return value
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be true or false, got {value!r}")
    if kind is str:
        return str(value)
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    try:
        out = kind(float(value)) if kind is int else kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if kind is int and out != float(value):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return out


def _build(cls, data: dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if key == "env":
            kwargs[key] = _build(EnvConfig, value or {}, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(prefix + key, str(fields[key].type), value)
    return cls(**kwargs)


def from_dict(data: dict[str, Any] | None) -> TrainConfig:
    return _build(TrainConfig, data or {})


def load_yaml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return data or {}


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b=value`` overrides; values are parsed as YAML scalars."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    data = load_yaml(path) if path is not None else {}
    data = apply_overrides(data, overrides or [])
    return from_dict(data).validate()


def dump_yaml(cfg: TrainConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)
