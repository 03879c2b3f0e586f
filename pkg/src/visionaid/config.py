"""Experiment configuration: one TOML file holds every hyperparameter.

Unknown keys, wrong types and out-of-range values are rejected before any
work starts, and the fully resolved config is echoed into the run
directory so it can be re-parsed to the identical object.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import OPS

ECHO_NAME = "config.toml"


class ConfigError(ValueError):
    pass


def _f(default, lo=None, hi=None, choices=None, lo_open=False):
    meta = {"lo": lo, "hi": hi, "choices": choices, "lo_open": lo_open}
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DataConfig:
    path: str = _f("")
    resolution: int = _f(32, lo=4)
    channels: int = _f(3, choices=(1, 3))
    batch_size: int = _f(16, lo=1)
    mirror: bool = _f(True)
    n_samples: int = _f(1000, lo=0)
    seed: int = _f(0, lo=0)


@dataclass
class GeneratorConfig:
    latent_dim: int = _f(64, lo=1)
    channels: int = _f(32, lo=1)
    optimizer: str = _f("adam", choices=("adam", "sgd"))
    lr: float = _f(0.002, lo=0.0)
    beta1: float = _f(0.0, lo=0.0, hi=1.0)
    beta2: float = _f(0.99, lo=0.0, hi=1.0)


@dataclass
class DiscriminatorConfig:
    channels: int = _f(32, lo=1)
    optimizer: str = _f("adam", choices=("adam", "sgd"))
    lr: float = _f(0.002, lo=0.0)
    beta1: float = _f(0.0, lo=0.0, hi=1.0)
    beta2: float = _f(0.99, lo=0.0, hi=1.0)
    r1_gamma: float = _f(1.0, lo=0.0)
    r1_interval: int = _f(16, lo=0)
    r1_heads: bool = _f(False)
    head_width: int = _f(0, lo=0)
    label_smoothing: float = _f(0.1, lo=0.0, hi=1.0)
    smoothing_threshold: float = _f(0.9, lo=0.0, hi=1.0)


@dataclass
class BankConfig:
    manifest: str = _f("")
    model_dir: str = _f("")
    candidates: list = _f([])


@dataclass
class SelectionConfig:
    k_max: int = _f(3, lo=0)
    strategy: str = _f("progressive", choices=("progressive", "fixed"))
    split_ratio: float = _f(0.7, lo=0.0, hi=1.0, lo_open=True)
    runs: int = _f(3, lo=1)
    l2: float = _f(1e-4, lo=0.0)
    max_samples: int = _f(10_000, lo=4)
    track_selected: bool = _f(True)


@dataclass
class AugmentationConfig:
    d_mode: str = _f("adaptive", choices=("adaptive", "fixed", "none"))
    d_target: float = _f(0.6, lo=0.0, hi=1.0)
    d_ops: list = _f(["xflip", "translation", "color"])
    head_mode: str = _f("adaptive", choices=("adaptive", "fixed", "none"))
    head_target: float = _f(0.3, lo=0.0, hi=1.0)
    head_ops: list = _f(list(OPS))
    initial_p: float = _f(0.0, lo=0.0, hi=1.0)
    adjust_step: float = _f(0.01, lo=0.0, hi=1.0)
    interval: int = _f(4, lo=1)


@dataclass
class ScheduleConfig:
    warmup_steps: int = _f(-1, lo=-1)
    intervals: list = _f([])
    total_steps: int = _f(0, lo=0)
    schedule_scale: float = _f(0.01, lo=0.0, lo_open=True)


@dataclass
class MetricsConfig:
    extractor: str = _f("metric_conv")
    snapshot_every: int = _f(500, lo=0)
    snapshot_n_gen: int = _f(1000, lo=2)
    n_gen: int = _f(5000, lo=2)
    reference_size: int = _f(0, lo=0)
    kid_subset_size: int = _f(1000, lo=2)
    kid_subsets: int = _f(100, lo=1)
    pr_k: int = _f(3, lo=1)
    divergence_factor: float = _f(2.0, lo=0.0)
    final_eval: bool = _f(True)


@dataclass
class RunConfig:
    seed: int = _f(0, lo=0)
    output_dir: str = _f("runs/default")
    log_every: int = _f(100, lo=0)
    device: str = _f("cpu", choices=("cpu", "cuda"))


SECTIONS = {
    "data": DataConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "bank": BankConfig,
    "selection": SelectionConfig,
    "augmentation": AugmentationConfig,
    "schedule": ScheduleConfig,
    "metrics": MetricsConfig,
    "run": RunConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields overridden, e.g. ``replace(run={"seed": 3})``."""
        d = self.to_dict()
        for name, overrides in sections.items():
            d[name].update(overrides)
        return from_dict(d)


def _check_value(section: str, f: dataclasses.Field, value: Any) -> Any:
    key = f"{section}.{f.name}"
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        value = list(value)
    meta = f.metadata
    if meta.get("choices") is not None and value not in meta["choices"]:
        raise ConfigError(f"{key}: {value!r} not one of {list(meta['choices'])}")
    lo, hi = meta.get("lo"), meta.get("hi")
    if lo is not None and (value < lo or (meta.get("lo_open") and value == lo)):
        raise ConfigError(f"{key}: {value!r} out of range (must be {'>' if meta.get('lo_open') else '>='} {lo})")
    if hi is not None and value > hi:
        raise ConfigError(f"{key}: {value!r} out of range (must be <= {hi})")
    return value


def _cross_checks(cfg: ExperimentConfig) -> None:
    if not cfg.data.path:
        raise ConfigError("data.path: required field is missing")
    for key, ops in (("augmentation.d_ops", cfg.augmentation.d_ops), ("augmentation.head_ops", cfg.augmentation.head_ops)):
        bad = [o for o in ops if o not in OPS]
        if bad:
            raise ConfigError(f"{key}: unknown ops {bad}; choose from {list(OPS)}")
    for t in cfg.schedule.intervals:
        if isinstance(t, bool) or not isinstance(t, int) or t < 1:
            raise ConfigError(f"schedule.intervals: every interval must be a positive integer, got {t!r}")
    if cfg.schedule.intervals and len(cfg.schedule.intervals) < cfg.selection.k_max:
        raise ConfigError("schedule.intervals: need one interval per model up to selection.k_max")
    if not all(isinstance(c, str) for c in cfg.bank.candidates):
        raise ConfigError("bank.candidates: expected a list of model ids")


def from_dict(raw: dict) -> ExperimentConfig:
    sections = {}
    for name, values in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"{name}: unknown section")
        if not isinstance(values, dict):
            raise ConfigError(f"{name}: expected a table")
        cls = SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigError(f"{name}.{key}: unknown key")
            kwargs[key] = _check_value(name, fields[key], value)
        sections[name] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    _cross_checks(cfg)
    return cfg


def parse_config(path, echo: bool = True, output_dir: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    cfg = from_dict(raw)
    # relative paths are relative to the config file
    base = path.resolve().parent
    if not cfg.data.path.startswith("synthetic:") and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((base / cfg.data.path).resolve())
    if cfg.bank.manifest and not Path(cfg.bank.manifest).is_absolute():
        cfg.bank.manifest = str((base / cfg.bank.manifest).resolve())
    if output_dir is not None:
        cfg.run.output_dir = output_dir
    if not Path(cfg.run.output_dir).is_absolute():
        cfg.run.output_dir = str((base / cfg.run.output_dir).resolve())
    if echo:
        write_echo(cfg)
    return cfg


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_echo(cfg: ExperimentConfig, directory=None) -> Path:
    out = Path(directory or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / ECHO_NAME
    target.write_text(dumps(cfg))
    return target
