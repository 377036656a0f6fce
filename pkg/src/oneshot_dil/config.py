"""Experiment configuration: YAML file <-> nested dataclasses, schema-checked."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .batchnorm import StatsMode
from .data import SyntheticSpec
from .harness import (BATCH_REGIMES, METHODS, BaseTrainConfig, DomainSpec, OneShotConfig,
                      TraceConfig)

OUTPUT_ENV = "ONESHOT_DIL_OUTPUT_DIR"


class ConfigError(ValueError):
    """Schema violation; ``problems`` lists one message per offending key."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DatasetConfig:
    kind: str = "synthetic"          # "idx" | "synthetic"
    images: str | None = None
    labels: str | None = None
    downsample: int = 1
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        errors = []
        if self.kind not in ("idx", "synthetic"):
            errors.append("kind must be 'idx' or 'synthetic'")
        elif self.kind == "idx" and not (self.images and self.labels):
            errors.append("idx datasets need both 'images' and 'labels'")
        if self.kind == "synthetic" and self.synthetic is None:
            self.synthetic = SyntheticSpec()
        if self.downsample < 1:
            errors.append("downsample must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class ModelConfig:
    """Architecture knobs; class count and input shape come from the data."""

    kind: str = "small_cnn"
    widths: tuple[int, ...] = (16, 32, 64)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.kind not in ("mlp", "small_cnn"):
            raise ValueError("kind must be 'mlp' or 'small_cnn'")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty list of positive ints")


@dataclass
class SweepConfig:
    methods: tuple[str, ...] = METHODS
    stats_modes: tuple[StatsMode, ...] = (StatsMode.UPDATED_STATS, StatsMode.FIXED_STATS)
    batch_regimes: tuple[tuple[int, int], ...] = BATCH_REGIMES

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.stats_modes = tuple(StatsMode.parse(m) for m in self.stats_modes)
        self.batch_regimes = tuple(tuple(int(b) for b in r) for r in self.batch_regimes)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if any(len(r) != 2 for r in self.batch_regimes):
            raise ValueError("each batch regime is a pair [|B|, |C|]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint: str | None = None    # defaults to <output_dir>/base.ckpt
    n_samples: int = 10
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    domains: DomainSpec = field(default_factory=lambda: DomainSpec(c1=1, c2=0))
    model: ModelConfig = field(default_factory=ModelConfig)
    base_train: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    one_shot: OneShotConfig = field(default_factory=OneShotConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        env = os.environ.get(OUTPUT_ENV)
        return Path(env) if env else self.resolve(self.output_dir)

    @property
    def checkpoint_path(self) -> Path:
        return self.resolve(self.checkpoint) if self.checkpoint else self.out_dir / "base.ckpt"

    def check_files(self) -> None:
        if self.dataset.kind == "idx":
            missing = [f"dataset.{k}: file not found: {self.resolve(getattr(self.dataset, k))}"
                       for k in ("images", "labels") if not self.resolve(getattr(self.dataset, k)).exists()]
            if missing:
                raise ConfigError(missing)

    def to_dict(self) -> dict:
        return to_plain(self)


# nested dataclass fields, by (owner, field name)
_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "domains"): DomainSpec,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "base_train"): BaseTrainConfig,
    (ExperimentConfig, "one_shot"): OneShotConfig,
    (ExperimentConfig, "sweep"): SweepConfig,
    (ExperimentConfig, "trace"): TraceConfig,
    (DatasetConfig, "synthetic"): SyntheticSpec,
    (OneShotConfig, "augment"): AugmentConfig,
}
_SKIP = {(ExperimentConfig, "base_dir")}


def to_plain(obj: Any) -> Any:
    """Dataclasses/enums/tuples -> YAML-safe dicts, strings and lists."""
    if is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)
                if (type(obj), f.name) not in _SKIP}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _build(cls, data, path: str, problems: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        return None
    known = {f.name for f in fields(cls) if f.init and (cls, f.name) not in _SKIP}
    for k in data:
        if k not in known:
            problems.append(f"{path + '.' if path else ''}{k}: unknown key")
    kwargs, ok = {}, True
    for name in known & set(data):
        sub = _NESTED.get((cls, name))
        val = data[name]
        if sub is not None and val is not None:
            val = _build(sub, val, f"{path + '.' if path else ''}{name}", problems)
            ok = ok and val is not None
        kwargs[name] = val
    if not ok:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or '<root>'}: {exc}")
        return None


def from_dict(data: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data, "", problems)
    if problems or cfg is None:
        raise ConfigError(problems or ["invalid configuration"])
    cfg.base_dir = Path(base_dir)
    return cfg


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def loads(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from exc
    return from_dict(data or {}, base_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    cfg = loads(path.read_text(), path.parent)
    cfg.check_files()
    return cfg
