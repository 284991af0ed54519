"""Experiment configuration: one YAML file, strict keys, ``--set`` overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .augment import AugmentConfig
from .errors import InvalidConfig
from .evalseg import FinetuneConfig
from .losses import LossConfig
from .masks import MaskConfig
from .model import ModelConfig


class ConfigError(InvalidConfig):
    """Malformed experiment config; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line
        self.key_message = message


@dataclass(frozen=True)
class DataConfig:
    corpus_size: int = 256  # unlabeled images for pretraining
    corpus_dir: Optional[str] = None  # read images from here instead of generating
    image_size: int = 64
    num_classes: int = 4
    train_size: int = 64  # labeled finetuning images
    val_size: int = 64
    labeled_dir: Optional[str] = None  # saved dataset with train/ and val/; generated when None


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 1
    max_steps: Optional[int] = None
    batch_size: int = 16
    lr: float = 0.03  # at batch 256; scaled linearly with batch size
    lr_scaling: str = "linear"
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.999
    bank_size: int = 4096
    bank_init: str = "keys"  # "keys": primed with key-encoder embeddings; "random": unit noise
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    num_workers: int = 0
    bn_groups: int = 1  # >1: shuffled sub-batch normalization for the key encoder

    def effective_lr(self) -> float:
        if self.lr_scaling == "linear":
            return self.lr * self.batch_size / 256
        return self.lr

    def validate(self):
        if self.batch_size < 2:
            raise InvalidConfig("trainer.batch_size must be >= 2 (batch-norm statistics)")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise InvalidConfig("trainer.ema_momentum must lie in [0, 1]")
        if self.lr_scaling not in ("linear", "none"):
            raise InvalidConfig("trainer.lr_scaling must be 'linear' or 'none'")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidConfig("trainer.schedule must be 'cosine' or 'constant'")
        if self.bank_init not in ("keys", "random"):
            raise InvalidConfig("trainer.bank_init must be 'keys' or 'random'")
        if self.bank_size < 1:
            raise InvalidConfig("trainer.bank_size must be positive")
        if self.bn_groups < 1 or self.batch_size % self.bn_groups:
            raise InvalidConfig("trainer.bn_groups must be >= 1 and divide trainer.batch_size")


@dataclass(frozen=True)
class QuickTuneConfig:
    init_checkpoint: Optional[str] = None
    epochs: int = 20
    lr: Optional[float] = None  # None: trainer.lr
    batch_size: Optional[int] = None  # None: trainer.batch_size


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    run_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    quicktune: QuickTuneConfig = field(default_factory=QuickTuneConfig)
    evalseg: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self):
        self.augment.validate(self.model.stride)
        self.masks.validate()
        self.model.validate()
        self.losses.validate()
        self.trainer.validate()
        self.evalseg.validate()
        if self.data.image_size < self.augment.target_size:
            raise InvalidConfig("data.image_size must be >= augment.target_size")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


# -- construction from nested dicts -------------------------------------------

def _coerce(value, tp, where, lines):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, where, lines)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"section {where!r} must be a mapping", lines.get(where))
        return _build(tp, value, where, lines)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list", lines.get(where))
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], where, lines) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where} needs {len(args)} entries, got {len(value)}", lines.get(where))
        return tuple(_coerce(v, a, where, lines) for v, a in zip(value, args))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}", lines.get(where))
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}", lines.get(where))
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}", lines.get(where))
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}", lines.get(where))
        return value
    return value


def _build(cls, data: dict, prefix: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}", lines.get(where))
        kwargs[key] = _coerce(value, hints[key], where, lines)
    return cls(**kwargs)


def _key_lines(node, prefix="", out=None):
    """Map dotted key paths to 1-based line numbers from a composed YAML node."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def config_from_dict(data: dict, lines: Optional[dict] = None) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return _build(ExperimentConfig, data, "", lines or {})


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = dict(data or {})
    for item in overrides or ():
        key, value = _parse_override(item)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return data


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from exc
    try:
        data = yaml.safe_load(text)
        lines = _key_lines(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, path) from exc
    data = apply_overrides(data or {}, overrides)
    try:
        cfg = config_from_dict(data, lines)
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(exc.key_message, exc.line, path) from exc
    except InvalidConfig as exc:
        raise ConfigError(str(exc), path=path) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
