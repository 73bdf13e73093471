"""Run configuration: dataclasses plus the sectioned ``key = value`` file format."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pruning import GRANULARITIES, MaskUpdatePolicy, SparsitySchedule

DENSE = "dense"
STATIC = "static"
DPF = "dpf"
DCIL = "dcil"
TRAINERS = (DENSE, STATIC, DPF, DCIL)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings {self}")


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    decays: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        epochs = [e for e, _ in self.decays]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"lr decay epochs must be strictly increasing, got {epochs}")
        if any(d <= 0 for _, d in self.decays):
            raise ConfigError("lr decay divisors must be positive")

    def lr_at(self, epoch: int) -> float:
        lr = self.initial
        for e, div in self.decays:
            if epoch >= e:
                lr /= div
        return lr


def _sec(name: str, **kw):
    return field(metadata={"section": name}, **kw)


@dataclass(frozen=True)
class TrainConfig:
    # [train]
    trainer: str = _sec("train", default=DCIL)
    epochs: int = _sec("train", default=20)
    batch_size: int = _sec("train", default=128)
    seed: int = _sec("train", default=0)
    precision: int = _sec("train", default=32)
    arch: str = _sec("train", default="desk_cnn")
    # [optimizer]
    lr: float = _sec("optimizer", default=0.1)
    momentum: float = _sec("optimizer", default=0.9)
    nesterov: bool = _sec("optimizer", default=True)
    weight_decay: float = _sec("optimizer", default=1e-4)
    lr_decays: str = _sec("optimizer", default="")
    # [sparsity]
    initial_sparsity: float = _sec("sparsity", default=0.0)
    target_sparsity: float = _sec("sparsity", default=0.9)
    start_epoch: float = _sec("sparsity", default=0.0)
    ramp_epochs: float = _sec("sparsity", default=15.0)
    # [mask]
    frequency: int = _sec("mask", default=16)
    granularity: str = _sec("mask", default="weight")
    freeze_after_ramp: bool = _sec("mask", default=False)
    # [kd]
    kd_weight: float = _sec("kd", default=1.0)
    temperature: float = _sec("kd", default=2.0)
    warmup_epochs: int = _sec("kd", default=0)
    kd_symmetric: bool = _sec("kd", default=False)
    # [data]
    dataset: str = _sec("data", default="mnist")
    data_dir: str = _sec("data", default="data/mnist")
    train_subset: int = _sec("data", default=0)
    test_subset: int = _sec("data", default=0)
    augment: str = _sec("data", default="none")
    # [output]
    out_dir: str = _sec("output", default="runs/default")
    checkpoint_every: int = _sec("output", default=0)
    probe_epoch: int = _sec("output", default=-1)
    probe_size: int = _sec("output", default=0)

    def __post_init__(self):
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {TRAINERS}, got {self.trainer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.kd_weight < 0:
            raise ConfigError("kd_weight must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.augment not in ("none", "cifar"):
            raise ConfigError(f"augment must be 'none' or 'cifar', got {self.augment!r}")
        if self.train_subset < 0 or self.test_subset < 0 or self.probe_size < 0 or self.checkpoint_every < 0:
            raise ConfigError("subset sizes and cadences must be >= 0")
        # build the derived objects once so their own invariants run now
        self.schedule, self.policy, self.optimizer, self.lr_schedule  # noqa: B018

    @property
    def schedule(self) -> SparsitySchedule:
        return SparsitySchedule(self.initial_sparsity, self.target_sparsity, self.start_epoch, self.ramp_epochs)

    @property
    def policy(self) -> MaskUpdatePolicy:
        return MaskUpdatePolicy(self.frequency, self.granularity)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.momentum, self.nesterov, self.weight_decay)

    @property
    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, parse_decays(self.lr_decays))

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_decays(text: str) -> tuple[tuple[int, float], ...]:
    """``"10:10, 15:10"`` -> ``((10, 10.0), (15, 10.0))``."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        epoch, sep, div = item.partition(":")
        try:
            out.append((int(epoch), float(div) if sep else 10.0))
        except ValueError:
            raise ConfigError(f"bad lr decay entry {item!r}; expected epoch:divisor") from None
    return tuple(out)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    typ = _FIELDS[name].type
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    changes = {}
    for key, raw in overrides.items():
        name = key.split(".", 1)[-1]
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        section = key.split(".", 1)[0] if "." in key else None
        if section is not None and section != _FIELDS[name].metadata["section"]:
            raise ConfigError(f"key {name!r} belongs to section [{_FIELDS[name].metadata['section']}], not [{section}]")
        changes[name] = _coerce(name, raw)
    return cfg.replace(**changes)


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    overrides = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in _FIELDS or _FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"unknown config key [{section}] {key}")
            overrides[f"{section}.{key}"] = value
    return apply_overrides(TrainConfig(), overrides)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def same_training(a: TrainConfig, b: TrainConfig) -> bool:
    """Equal up to the [output] section and data location, neither of which changes the trajectory."""
    keep = {f.name: getattr(a, f.name) for f in fields(TrainConfig)
            if f.metadata["section"] == "output" or f.name == "data_dir"}
    return b.replace(**keep) == a


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for f in fields(TrainConfig):
        sec = f.metadata["section"]
        if not parser.has_section(sec):
            parser.add_section(sec)
        value = getattr(cfg, f.name)
        parser.set(sec, f.name, repr(value) if isinstance(value, float) else str(value))
    buf = io.StringIO()
    parser.write(buf, space_around_delimiters=False)
    return buf.getvalue()
