"""Experiment configuration: one YAML file, command-line overrides on top.

Precedence is flags > file > defaults. ``dump_config(load_config(text))`` is
canonical: sorted keys, every field present.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .detect import ReverseWindowMethod
from .syndata import ANOMALY_TYPES, CYCLE_NAMES
from .train import AnnealSchedule


@dataclass
class DataSection:
    dir: str | None = None  # defaults to <output_dir>/data
    n_train: int = 200
    budget: int = 1
    cycles: list[str] = field(default_factory=lambda: list(CYCLE_NAMES[:4]))
    anomalies_per_pair: int = 1
    anomaly_ratio: float = 0.063
    val_fraction: float = 0.2
    magnitudes: dict[str, float] = field(default_factory=dict)
    midpoint_share: float = 3 / 8
    seed: int = 0


@dataclass
class PreprocessSection:
    window: int | None = 64  # None: estimate from the training autocorrelation
    max_lag: int = 512
    min_window: int = 16


@dataclass
class ModelSection:
    d_Z: int = 16
    h: int = 8
    d_K: int | None = None
    enc_hidden: list[int] = field(default_factory=lambda: [32, 16])
    dec_hidden: list[int] = field(default_factory=lambda: [16, 32])
    attention: bool = True


@dataclass
class TrainSection:
    batch_size: int = 64
    max_epochs: int | None = 100
    patience: int = 20
    corrupt_std: float = 0.01
    learning_rate: float = 1e-3
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    reverse: str = "mean"
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    benchmark_methods: list[str] = field(default_factory=lambda: ["mean"])

    def __post_init__(self):
        validate(self)

    @property
    def data_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir else Path(self.output_dir) / "data"

    @property
    def variant(self) -> str:
        return "tevae" if self.model.attention else "noma"

    def to_dict(self) -> dict:
        return asdict(self)


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ValueError("seeds must be a non-empty list")
    ReverseWindowMethod(cfg.reverse)
    for m in cfg.benchmark_methods:
        ReverseWindowMethod(m)
    unknown = set(cfg.data.cycles) - set(CYCLE_NAMES)
    if unknown or not cfg.data.cycles:
        raise ValueError(f"unknown or empty drive cycles: {sorted(unknown)}")
    bad = set(cfg.data.magnitudes) - set(ANOMALY_TYPES)
    if bad:
        raise ValueError(f"unknown anomaly types in magnitudes: {sorted(bad)}")
    if cfg.preprocess.window is not None and cfg.preprocess.window < 1:
        raise ValueError("window must be positive")
    if len(cfg.model.enc_hidden) != 2 or len(cfg.model.dec_hidden) != 2:
        raise ValueError("enc_hidden and dec_hidden need exactly two sizes")
    if cfg.threads < 1:
        raise ValueError("threads must be >= 1")


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValueError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    extra = set(raw) - set(known)
    if extra:
        raise ValueError(f"unknown keys in {where or 'config'}: {sorted(extra)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    (ExperimentConfig, "data"): DataSection,
    (ExperimentConfig, "preprocess"): PreprocessSection,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "train"): TrainSection,
    (TrainSection, "anneal"): AnnealSchedule,
}


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "")


def load_config(path_or_text) -> ExperimentConfig:
    """Parse a YAML file path or YAML text."""
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text
                                          and path_or_text.endswith((".yaml", ".yml"))):
        path = Path(path_or_text)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
    else:
        text = path_or_text
    return config_from_dict(yaml.safe_load(text))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def override(cfg: ExperimentConfig, dotted: dict, skip_none: bool = True) -> ExperimentConfig:
    """New config with ``{"model.d_Z": 8, ...}`` applied; ``None`` values are skipped by default."""
    raw = cfg.to_dict()
    for key, value in dotted.items():
        if value is None and skip_none:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[p]
        if leaf not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[leaf] = value
    return config_from_dict(raw)
