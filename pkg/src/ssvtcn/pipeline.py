"""End-to-end glue: split, encode, window, train, calibrate, detect."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Encoder, RawRecord, Split, SplitSpec, chronological_split, fit_encoder, make_windows
from .detector import DEFAULT_QUANTILE, ClassIntervals, DetectionResult, calibrate, detect_stream
from .model import DEFAULT_SIGMA, EpochRecord, Model, ModelConfig, TrainConfig, TrainHistory, fit


@dataclass(frozen=True)
class PipelineSettings:
    """Every knob of a run except the data and the seed."""

    num_classes: int = 4
    window: int = 16
    levels: int = 8
    channels: int = 8
    kernel_size: int = 3
    latent_dim: int = 16
    sigma: float = DEFAULT_SIGMA
    lr: float = 0.005
    epochs: int = 8
    batch_size: int = 32
    train_fraction: float = 0.8
    labeled_fraction: float = 0.4
    quantile: float = DEFAULT_QUANTILE
    categorical: tuple[int, ...] | None = None

    def with_ratio(self, labeled_fraction: float) -> PipelineSettings:
        return replace(self, labeled_fraction=labeled_fraction)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.labeled_fraction, self.num_classes)

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            num_classes=self.num_classes,
            window=self.window,
            levels=self.levels,
            channels=self.channels,
            kernel_size=self.kernel_size,
            latent_dim=self.latent_dim,
            sigma=self.sigma,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=seed)


@dataclass
class Prepared:
    split: Split
    encoder: Encoder
    window: int
    labeled_windows: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_windows: np.ndarray
    test_features: np.ndarray
    test_timestamps: list[float]
    test_labels: np.ndarray  # -1 where unknown
    context: np.ndarray  # training rows preceding the test split

    @property
    def input_dim(self) -> int:
        return self.test_features.shape[1] if self.test_features.size else self.labeled_windows.shape[2]


def prepare(records: Sequence[RawRecord], settings: PipelineSettings) -> Prepared:
    """Chronological split, then an encoder fitted on the training split only.

    Windows are cut over the contiguous training sequence, so unlabeled
    windows may look back into labeled records but never forward.
    """
    split = chronological_split(records, settings.split_spec())
    if not split.labeled:
        raise ValueError("the labeled split is empty; raise labeled_fraction or add records")
    train = split.train
    encoder = fit_encoder(train, settings.categorical)
    train_x = encoder.transform(train)
    windows = make_windows(train_x, settings.window)
    n_lab = len(split.labeled)
    test_x = encoder.transform(split.test)
    return Prepared(
        split=split,
        encoder=encoder,
        window=settings.window,
        labeled_windows=windows[:n_lab],
        labeled_labels=np.asarray([r.label for r in split.labeled], dtype=np.int64),
        unlabeled_windows=windows[n_lab:],
        test_features=test_x,
        test_timestamps=[r.timestamp for r in split.test],
        test_labels=np.asarray([-1 if r.label is None else r.label for r in split.test], dtype=np.int64),
        context=train_x[-(settings.window - 1):] if settings.window > 1 else train_x[:0],
    )


@dataclass
class RunResult:
    model: Model
    history: TrainHistory
    intervals: ClassIntervals
    results: list[DetectionResult] = field(default_factory=list)


def train(
    prepared: Prepared,
    settings: PipelineSettings,
    seed: int,
    supervised: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, TrainHistory, ClassIntervals]:
    """Fit the model and calibrate its p^v intervals on the labeled split."""
    config = settings.model_config(prepared.labeled_windows.shape[2])
    model, history = fit(
        prepared.labeled_windows,
        prepared.labeled_labels,
        None if supervised else prepared.unlabeled_windows,
        config,
        settings.train_config(seed),
        on_epoch=on_epoch,
    )
    intervals = calibrate(model, prepared.labeled_windows, prepared.labeled_labels, settings.quantile)
    model.metadata["encoder"] = prepared.encoder.to_dict()
    return model, history, intervals


def train_and_detect(prepared: Prepared, settings: PipelineSettings, seed: int,
                     supervised: bool = False) -> RunResult:
    model, history, intervals = train(prepared, settings, seed, supervised)
    results = detect_stream(
        model, intervals, prepared.test_features, prepared.test_timestamps, context=prepared.context
    )
    return RunResult(model, history, intervals, results)
