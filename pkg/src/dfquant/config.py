"""Experiment configuration: nested dataclasses, validation and overrides.

Epoch counts left unset resolve from the active preset: the full-length
schedule selected by ``paper_scale`` (400 total / 50 warm-up epochs) or the
desk-scale preset that divides both by 20, rounding up.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SEED_ENV = "DFQ_SEED"
PAPER_TOTAL_EPOCHS = 400
PAPER_WARMUP_EPOCHS = 50
DESK_DIVISOR = 20


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class DataConfig:
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: int = 32
    channels: int = 3
    noise_level: float = 30.0
    color_jitter: float = 60.0
    seed: int = 0


@dataclass
class ModelConfig:
    arch: str = "tiny-cnn-6"
    width: int = 8


@dataclass
class TeacherConfig:
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 50
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class QuantSection:
    weight_bits: int = 4
    act_bits: int = 4
    range_momentum: float = 0.1


@dataclass
class GeneratorConfig:
    noise_dim: int = 64
    width: int = 16
    lr: float = 1e-3


@dataclass
class LossSection:
    alpha1: float = 0.1
    alpha2: float = 0.9
    alpha3: float = 0.6
    gamma: float = 1.0


@dataclass
class FDASection:
    beta_fd: float = 0.2
    l_st: int = -1  # -1: first layer of the last third
    init_batches: int = 4


@dataclass
class DESection:
    lambda_mu: float = 0.3
    lambda_sigma: float = 0.15


@dataclass
class ScheduleConfig:
    total_epochs: int | None = None
    warmup_epochs: int | None = None
    steps_per_epoch: int = 20
    batch_size: int = 40
    student_lr: float = 1e-4
    student_update_every: int = 1
    probe_per_class: int = 10
    eval_batch_size: int = 256


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    quant: QuantSection = field(default_factory=QuantSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    loss: LossSection = field(default_factory=LossSection)
    fda: FDASection = field(default_factory=FDASection)
    de: DESection = field(default_factory=DESection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    paper_scale: bool = False

    @property
    def total_epochs(self) -> int:
        if self.schedule.total_epochs is not None:
            return self.schedule.total_epochs
        return PAPER_TOTAL_EPOCHS if self.paper_scale else math.ceil(PAPER_TOTAL_EPOCHS / DESK_DIVISOR)

    @property
    def warmup_epochs(self) -> int:
        if self.schedule.warmup_epochs is not None:
            return self.schedule.warmup_epochs
        return PAPER_WARMUP_EPOCHS if self.paper_scale else math.ceil(PAPER_WARMUP_EPOCHS / DESK_DIVISOR)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved(self) -> dict:
        d = self.to_dict()
        d["schedule"]["total_epochs"] = self.total_epochs
        d["schedule"]["warmup_epochs"] = self.warmup_epochs
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _section_fields(section_obj) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(section_obj)}


def _coerce(value, current, name):
    """Convert ``value`` (possibly a CLI string) to the type of ``current``/the field."""
    if isinstance(value, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError:
            pass
    if isinstance(current, bool) or name == "paper_scale":
        if not isinstance(value, bool):
            raise TypeError("expected a boolean")
        return value
    if isinstance(current, int) or (current is None and isinstance(value, int)):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise TypeError("expected an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if current is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise TypeError("expected an integer or null")
    return value


def _normalize_key(key: str) -> str:
    return key.replace("-", "_")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any], problems: list[str]) -> None:
    """Apply ``{"section.key": value}`` or nested ``{"section": {...}}`` overrides in place."""
    flat: dict[str, Any] = {}
    for k, v in overrides.items():
        k = _normalize_key(k)
        if isinstance(v, dict) and k in _SECTIONS:
            for sk, sv in v.items():
                flat[f"{k}.{_normalize_key(sk)}"] = sv
        else:
            flat[k] = v
    for key, value in flat.items():
        parts = key.split(".")
        try:
            if len(parts) == 1:
                if parts[0] not in ("seed", "paper_scale"):
                    raise KeyError
                setattr(cfg, parts[0], _coerce(value, getattr(cfg, parts[0]), parts[0]))
            elif len(parts) == 2 and parts[0] in _SECTIONS:
                section = getattr(cfg, parts[0])
                if parts[1] not in _section_fields(section):
                    raise KeyError
                setattr(section, parts[1], _coerce(value, getattr(section, parts[1]), parts[1]))
            else:
                raise KeyError
        except KeyError:
            problems.append(f"{key}: unknown key")
        except TypeError as e:
            problems.append(f"{key}: {e} (got {value!r})")


def validate(cfg: ExperimentConfig) -> list[str]:
    p = []

    def check(cond, key, msg):
        if not cond:
            p.append(f"{key}: {msg}")

    from .modelkit.classifier import ARCHITECTURES

    check(2 <= cfg.data.num_classes <= 10, "data.num_classes", "must be in [2, 10]")
    check(cfg.data.samples_per_class >= 50, "data.samples_per_class", "must be >= 50")
    check(cfg.data.image_size >= 8 and cfg.data.image_size % 4 == 0, "data.image_size", "must be a multiple of 4, >= 8")
    check(cfg.data.channels in (1, 3), "data.channels", "must be 1 or 3")
    check(cfg.data.noise_level >= 0, "data.noise_level", "must be >= 0")
    check(cfg.data.color_jitter >= 0, "data.color_jitter", "must be >= 0")
    check(cfg.model.arch in ARCHITECTURES, "model.arch", f"must be one of {', '.join(ARCHITECTURES)}")
    check(cfg.model.width >= 1, "model.width", "must be >= 1")
    check(cfg.teacher.epochs >= 1, "teacher.epochs", "must be >= 1")
    check(cfg.teacher.lr > 0, "teacher.lr", "must be > 0")
    check(cfg.teacher.batch_size >= 2, "teacher.batch_size", "must be >= 2")
    check(cfg.teacher.weight_decay >= 0, "teacher.weight_decay", "must be >= 0")
    for name in ("weight_bits", "act_bits"):
        check(2 <= getattr(cfg.quant, name) <= 16, f"quant.{name}", "must be in [2, 16]")
    check(0 <= cfg.quant.range_momentum <= 1, "quant.range_momentum", "must be in [0, 1]")
    check(cfg.generator.noise_dim >= 1, "generator.noise_dim", "must be >= 1")
    check(cfg.generator.width >= 1, "generator.width", "must be >= 1")
    check(cfg.generator.lr >= 0, "generator.lr", "must be >= 0")
    for name in ("alpha1", "alpha2", "alpha3", "gamma"):
        check(getattr(cfg.loss, name) >= 0, f"loss.{name}", "must be >= 0")
    check(0 <= cfg.fda.beta_fd <= 1, "fda.beta_fd", "must be in [0, 1]")
    check(cfg.fda.l_st >= -1, "fda.l_st", "must be -1 (auto) or a layer index")
    check(cfg.fda.init_batches >= 1, "fda.init_batches", "must be >= 1")
    check(cfg.de.lambda_mu >= 0, "de.lambda_mu", "must be >= 0")
    check(cfg.de.lambda_sigma >= 0, "de.lambda_sigma", "must be >= 0")
    s = cfg.schedule
    check(s.steps_per_epoch >= 1, "schedule.steps_per_epoch", "must be >= 1")
    check(s.batch_size >= 2, "schedule.batch_size", "must be >= 2")
    check(s.student_lr >= 0, "schedule.student_lr", "must be >= 0")
    check(s.student_update_every >= 1, "schedule.student_update_every", "must be >= 1")
    check(s.probe_per_class >= 2, "schedule.probe_per_class", "must be >= 2")
    check(s.eval_batch_size >= 1, "schedule.eval_batch_size", "must be >= 1")
    check(cfg.total_epochs >= 1, "schedule.total_epochs", "must be >= 1")
    check(0 <= cfg.warmup_epochs <= cfg.total_epochs, "schedule.warmup_epochs", "must be in [0, total_epochs]")
    return p


def parse_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None,
                 env: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a validated config: defaults, then the YAML/JSON file, then the seed
    environment variable, then explicit overrides.

    Every unknown key and out-of-range value is collected before raising
    :class:`ConfigError`.
    """
    cfg = ExperimentConfig()
    problems: list[str] = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{p}: top level must be a mapping"])
        apply_overrides(cfg, loaded, problems)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        apply_overrides(cfg, {"seed": env[SEED_ENV]}, problems)
    if overrides:
        apply_overrides(cfg, overrides, problems)
    if not problems:
        problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def with_overrides(cfg: ExperimentConfig, **dotted) -> ExperimentConfig:
    """Copy of ``cfg`` with ``section__key=value`` overrides, validated."""
    new = ExperimentConfig(**{k: dataclasses.replace(v) if dataclasses.is_dataclass(v) else v
                              for k, v in vars(cfg).items()})
    problems: list[str] = []
    apply_overrides(new, {k.replace("__", "."): v for k, v in dotted.items()}, problems)
    problems = problems or validate(new)
    if problems:
        raise ConfigError(problems)
    return new
