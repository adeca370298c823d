"""Experiment configuration: one JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dsp import PROFILES, DSPProfile
from .errors import ConfigError
from .io import config_hash
from .losses import LossWeights
from .model import DESK_MODEL, PAPER_MODEL, SeparatorConfig

METHODS = ("finetune", "distill_only", "contav_sep", "upper_bound")


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    num_classes: int = 20
    num_tasks: int = 4
    samples_per_class: int = 20
    data_seed: int = 0
    method: str = "contav_sep"
    similarity_mode: str = "cross"
    symmetric_anchors: bool = True
    memory_per_class: int = 1
    lambda_ins: float = 0.1
    lambda_cls: float = 0.3
    lambda_dist: float = 0.3
    temperature: float = 0.07
    seeds: tuple = (0, 1, 2)
    steps_per_task: int = 120
    batch_size: int = 8
    train_crop_frames: int | None = None   # random time crop per training pair; None = full clip
    lr: float = 3e-3
    clip_norm: float | None = None
    lr_scales: dict = field(default_factory=dict)   # parameter-name prefix -> lr multiplier
    train_same_class_pairs: bool = True
    eval_cross_class_only: bool = True
    eval_mixtures: int = 32
    filter_len: int = 512
    model: dict = field(default_factory=dict)   # SeparatorConfig overrides

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile '{self.profile}' (choose from {sorted(PROFILES)})")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}' (choose from {list(METHODS)})")
        if self.similarity_mode not in ("cross", "intra"):
            raise ConfigError(f"similarity_mode must be 'cross' or 'intra', got '{self.similarity_mode}'")
        if self.num_tasks < 1 or self.num_tasks > self.num_classes:
            raise ConfigError(f"cannot split {self.num_classes} classes into {self.num_tasks} tasks")
        if self.memory_per_class < 0:
            raise ConfigError("memory_per_class must be non-negative")
        if self.method in ("distill_only", "contav_sep") and self.num_tasks > 1 \
                and self.memory_per_class < 1:
            raise ConfigError(f"method '{self.method}' needs memory_per_class >= 1")
        if self.steps_per_task < 1 or self.batch_size < 1 or self.eval_mixtures < 1:
            raise ConfigError("steps_per_task, batch_size and eval_mixtures must be positive")
        if self.train_crop_frames is not None and not 0 < self.train_crop_frames <= self.dsp.n_frames:
            raise ConfigError(f"train_crop_frames must lie in (0, {self.dsp.n_frames}]")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.loss_weights()
        self.separator_config()

    @property
    def dsp(self) -> DSPProfile:
        return PROFILES[self.profile]

    @property
    def uses_memory(self) -> bool:
        return self.method in ("distill_only", "contav_sep")

    def loss_weights(self) -> LossWeights:
        """Weights actually used by ``method``; the configured lambdas apply to contav_sep."""
        if self.method in ("finetune", "upper_bound"):
            return LossWeights(0.0, 0.0, 0.0, self.temperature)
        if self.method == "distill_only":
            return LossWeights(0.0, 0.0, self.lambda_dist, self.temperature)
        return LossWeights(self.lambda_ins, self.lambda_cls, self.lambda_dist, self.temperature)

    def separator_config(self) -> SeparatorConfig:
        base = DESK_MODEL if self.profile == "desk" else PAPER_MODEL
        prof = self.dsp
        overrides = dict(self.model)
        if "channels" in overrides:
            overrides["channels"] = tuple(overrides["channels"])
        try:
            return replace(base, freq_bins=prof.log_bins, frames=prof.n_frames, **overrides)
        except TypeError as exc:
            raise ConfigError(f"bad model override: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _coerce(name: str, raw: str):
    kinds = {f.name: f for f in fields(ExperimentConfig)}
    if name.startswith("model."):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    if name not in kinds:
        raise ConfigError(f"unknown config key '{name}'")
    default = getattr(ExperimentConfig(), name)
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if name == "train_crop_frames":
            return None if raw.lower() == "none" else int(raw)
        if isinstance(default, float) or name == "clip_norm":
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if isinstance(default, dict):
            return json.loads(raw)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"cannot parse {name}={raw!r}") from None
    return raw


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings; ``model.<field>=<json>`` edits separator settings."""
    updates: dict = {}
    model = dict(cfg.model)
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        value = _coerce(key, raw.strip())
        if key.startswith("model."):
            model[key[len("model."):]] = value
        else:
            updates[key] = value
    if model != cfg.model:
        updates["model"] = model
    return replace(cfg, **updates)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = ExperimentConfig(**data)
    return apply_overrides(cfg, overrides or [])
