"""Flat ``key = value`` run configuration.

One file carries every knob: data generation, model shape, optimizer recipe
and loss weights. Keys map one-to-one onto dataclass fields; ``grid_n`` is
shared by the data and model sections. ``ablation`` selects a loss-weight
preset which explicit weight keys then override.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .objective import LossWeights, ablation_weights
from .scenegen import DataConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = True
    clip_norm: float = 1.0
    patience: int = 20
    seed: int = 42
    augment: bool = True
    # evaluate with the posterior mean (False draws one latent sample)
    eval_posterior_mean: bool = True

    def __post_init__(self):
        if not self.lr0 > self.lr_final > 0:
            raise ConfigError("need lr0 > lr_final > 0")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


@dataclass(frozen=True)
class RunConfig:
    ablation: str = "curvature-only"
    data_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # None selects the preset of ``ablation``
    weights: LossWeights | None = None

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", ablation_weights(self.ablation))

    def with_overrides(self, **kv) -> "RunConfig":
        return resolve({**to_mapping(self), **{k: str(v) for k, v in kv.items()}})


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "weights": LossWeights}
_TOP = ("ablation", "data_seed")


def parse(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return dict(cp["run"])


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return type(default)(raw)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve(mapping: dict[str, str]) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown keys and bad values."""
    known = set(_TOP)
    for cls in _SECTIONS.values():
        known.update(f.name for f in fields(cls))
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        ablation = mapping.get("ablation", RunConfig.ablation).strip()
        built = {}
        for name, cls in _SECTIONS.items():
            base = ablation_weights(ablation) if cls is LossWeights else cls()
            kw = {f.name: _convert(mapping[f.name], getattr(base, f.name))
                  for f in fields(cls) if f.name in mapping}
            built[name] = replace(base, **kw)
        data_seed = int(mapping.get("data_seed", RunConfig.data_seed))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if built["data"].grid_n != built["model"].grid_n:
        raise ConfigError("grid_n differs between data and model")
    return RunConfig(ablation, data_seed, **built)


def to_mapping(run: RunConfig) -> dict[str, str]:
    out = {"ablation": run.ablation, "data_seed": str(run.data_seed)}
    for name in _SECTIONS:
        section = getattr(run, name)
        for f in fields(section):
            out.setdefault(f.name, _format(getattr(section, f.name)))
    return out


def dump(run: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(run).items())


def load(path) -> RunConfig:
    return resolve(parse(Path(path).read_text()))
