"""TOML run configuration.

Every key is optional and every table is closed: an unknown key is an
error rather than a silently ignored typo.  Defaults::

    seed = 0

    [data]
    path = ""                 # CSV read by train and detect
    timestamp = "timestamp"
    label = "label"           # "" for unlabeled input
    features = []             # [] = every other column
    categorical = []          # [] = detect from the training values
    [data.label_map]          # label text -> class index
    normal = 0
    dos = 1
    malicious = 2
    spying = 3

    [synth]
    records = 10000
    seed = 7
    priors = [0.5, 0.2696875, 0.1680625, 0.06225]
    features = 11
    ar_coefficient = 0.9
    dos_scale = 3.0
    malicious_offset = 2.0
    spying_amplitude = 0.8
    spying_period = 4
    episode_means = [24.0, 12.0, 10.0, 8.0]

    [model]
    num_classes = 4
    window = 16
    levels = 8
    channels = 8
    kernel_size = 3
    latent_dim = 16
    sigma = 4.0

    [train]
    lr = 0.005
    epochs = 8
    batch_size = 32

    [split]
    train_fraction = 0.8
    labeled_fraction = 0.4

    [detector]
    quantile = 0.05

    [grid]
    ratios = [0.1, 0.2, 0.3, 0.4, 0.5]
    modes = ["ss-vtcn", "ss-wvtcn", "supervised"]
    seeds = [0, 1, 2, 3, 4]
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DEFAULT_LABEL_MAP, CsvSchema, SynthConfig
from .evaluation import DEFAULT_RATIOS, MODES, canonical_mode
from .pipeline import PipelineSettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    timestamp: str = "timestamp"
    label: str = "label"
    features: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    label_map: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_MAP))

    def schema(self) -> CsvSchema:
        return CsvSchema(
            timestamp=self.timestamp,
            features=self.features or None,
            label=self.label or None,
            categorical=self.categorical or None,
            label_map=dict(self.label_map),
        )


@dataclass(frozen=True)
class ModelSection:
    num_classes: int = 4
    window: int = 16
    levels: int = 8
    channels: int = 8
    kernel_size: int = 3
    latent_dim: int = 16
    sigma: float = PipelineSettings.sigma


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.005
    epochs: int = 8
    batch_size: int = 32


@dataclass(frozen=True)
class SplitSection:
    train_fraction: float = 0.8
    labeled_fraction: float = 0.4


@dataclass(frozen=True)
class DetectorSection:
    quantile: float = 0.05


@dataclass(frozen=True)
class GridSection:
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    modes: tuple[str, ...] = MODES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Config:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    split: SplitSection = field(default_factory=SplitSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    grid: GridSection = field(default_factory=GridSection)

    def settings(self, categorical: tuple[int, ...] | None = None) -> PipelineSettings:
        return PipelineSettings(
            num_classes=self.model.num_classes,
            window=self.model.window,
            levels=self.model.levels,
            channels=self.model.channels,
            kernel_size=self.model.kernel_size,
            latent_dim=self.model.latent_dim,
            sigma=self.model.sigma,
            lr=self.train.lr,
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            train_fraction=self.split.train_fraction,
            labeled_fraction=self.split.labeled_fraction,
            quantile=self.detector.quantile,
            categorical=categorical,
        )

    def with_overrides(self, seed: int | None = None, labeled_ratio: float | None = None) -> Config:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if labeled_ratio is not None:
            cfg = replace(cfg, split=replace(cfg.split, labeled_fraction=labeled_ratio))
        return cfg


_SECTIONS = {
    "data": DataSection,
    "synth": SynthConfig,
    "model": ModelSection,
    "train": TrainSection,
    "split": SplitSection,
    "detector": DetectorSection,
    "grid": GridSection,
}


def _coerce(where: str, value, default):
    """Check a TOML value against the type of its default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, dict):
        ok = isinstance(value, dict) and all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in value.values())
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        if ok:
            proto = default[0] if default else None
            value = tuple(_coerce(f"{where}[{i}]", v, proto) if proto is not None else v
                          for i, v in enumerate(value))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(name: str, cls, table) -> object:
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}; valid keys: {', '.join(sorted(known))}")
    kwargs = {k: _coerce(f"{name}.{k}", v, getattr(defaults, k)) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(raw: dict) -> Config:
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    if "seed" in raw:
        kwargs["seed"] = _coerce("seed", raw["seed"], 0)
    cfg = Config(**kwargs)
    try:
        for mode in cfg.grid.modes:
            canonical_mode(mode)
    except ValueError as exc:
        raise ConfigError(f"grid.modes: {exc}") from exc
    if not 0 <= cfg.detector.quantile <= 0.5:
        raise ConfigError("detector.quantile must lie in [0, 0.5]")
    settings = cfg.settings()
    try:
        settings.split_spec()
        settings.model_config(input_dim=1)
        settings.train_config(cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
