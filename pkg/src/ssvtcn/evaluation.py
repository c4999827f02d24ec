"""Per-class precision / recall / F1, macro average, and the labeled-ratio grid."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5)
MODES = ("ss-vtcn", "ss-wvtcn", "supervised")
MODE_ALIASES = {"supervised-vtcn": "supervised", "vtcn": "supervised"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{len(t)} true labels but {len(p)} predictions")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def precision_recall_f1(cm: ConfusionMatrix, c: int) -> tuple[float, float, float]:
    """One-vs-rest scores for class ``c``; any 0/0 is taken as 0."""
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def avg_f1(f1_values: Sequence[float]) -> float:
    """Unweighted mean over classes (macro F1)."""
    values = list(f1_values)
    if not values:
        raise ValueError("avg_f1 needs at least one class")
    return float(sum(values) / len(values))


@dataclass
class Report:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    avg_f1: float
    support: list[int] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> Report:
        scores = [precision_recall_f1(cm, c) for c in range(cm.num_classes)]
        f1 = [s[2] for s in scores]
        return cls(
            precision=[s[0] for s in scores],
            recall=[s[1] for s in scores],
            f1=f1,
            avg_f1=avg_f1(f1),
            support=cm.counts.sum(axis=1).astype(int).tolist(),
        )

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "avg_f1": self.avg_f1,
            "support": self.support,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Report:
        return cls(d["precision"], d["recall"], d["f1"], d["avg_f1"], d.get("support", []))

    def to_table(self, class_names: Sequence[str] | None = None) -> str:
        names = class_names or [str(c) for c in range(len(self.f1))]
        lines = [f"{'class':<12}{'precision':>10}{'recall':>10}{'F1':>10}{'support':>10}"]
        for c, name in enumerate(names):
            support = self.support[c] if c < len(self.support) else ""
            lines.append(
                f"{name:<12}{100 * self.precision[c]:>10.2f}{100 * self.recall[c]:>10.2f}"
                f"{100 * self.f1[c]:>10.2f}{support:>10}"
            )
        lines.append(f"{'Avg':<12}{'':>10}{'':>10}{100 * self.avg_f1:>10.2f}")
        return "\n".join(lines)


def evaluate(true_labels, predicted_labels, num_classes: int) -> Report:
    return Report.from_confusion(confusion(true_labels, predicted_labels, num_classes))


# ---------------------------------------------------------------------------
# Experiment grid


@dataclass
class GridCell:
    ratio: float
    mode: str
    seed: int
    report: Report | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "mode": self.mode,
            "seed": self.seed,
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridCell:
        report = None if d.get("report") is None else Report.from_dict(d["report"])
        return cls(float(d["ratio"]), d["mode"], int(d["seed"]), report, d.get("error"))


@dataclass
class GridReport:
    num_classes: int
    cells: list[GridCell] = field(default_factory=list)

    def cell(self, ratio: float, mode: str, seed: int) -> GridCell:
        for c in self.cells:
            if c.ratio == ratio and c.mode == mode and c.seed == seed:
                return c
        raise KeyError((ratio, mode, seed))

    @property
    def ratios(self) -> list[float]:
        return sorted({c.ratio for c in self.cells})

    @property
    def modes(self) -> list[str]:
        seen = {c.mode for c in self.cells}
        return [m for m in MODES if m in seen]

    def mean_f1(self, ratio: float, mode: str) -> tuple[list[float], float] | None:
        """Seed-averaged per-class F1 and Avg for one (ratio, mode), ignoring failed cells."""
        reports = [c.report for c in self.cells if c.ratio == ratio and c.mode == mode and c.report]
        if not reports:
            return None
        per_class = np.mean([r.f1 for r in reports], axis=0).tolist()
        return per_class, float(np.mean([r.avg_f1 for r in reports]))

    def to_dict(self) -> dict:
        summary = []
        for ratio in self.ratios:
            for mode in self.modes:
                agg = self.mean_f1(ratio, mode)
                if agg is not None:
                    summary.append({"ratio": ratio, "mode": mode, "f1": agg[0], "avg_f1": agg[1]})
        return {
            "num_classes": self.num_classes,
            "cells": [c.to_dict() for c in self.cells],
            "summary": summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridReport:
        return cls(int(d["num_classes"]), [GridCell.from_dict(c) for c in d["cells"]])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> GridReport:
        return cls.from_dict(json.loads(text))

    def to_table(self) -> str:
        """Rows ratio x class (plus Avg), one column per mode, F1 in percent."""
        modes = self.modes
        lines = [f"{'ratio':<7}{'class':<7}" + "".join(f"{m:>12}" for m in modes)]
        for ratio in self.ratios:
            aggs = {m: self.mean_f1(ratio, m) for m in modes}
            for row in list(range(self.num_classes)) + ["Avg"]:
                label = f"{ratio:.0%}" if row == 0 else ""
                cells = []
                for m in modes:
                    agg = aggs[m]
                    if agg is None:
                        cells.append(f"{'failed':>12}")
                    else:
                        value = agg[1] if row == "Avg" else agg[0][row]
                        cells.append(f"{100 * value:>12.2f}")
                lines.append(f"{label:<7}{str(row):<7}" + "".join(cells))
        failures = [c for c in self.cells if c.error]
        for c in failures:
            lines.append(f"! ratio={c.ratio} mode={c.mode} seed={c.seed}: {c.error}")
        return "\n".join(lines)


def run_grid(
    records,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    modes: Sequence[str] = MODES,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    settings=None,
    progress: Callable[[GridCell], None] | None = None,
) -> GridReport:
    """Split, train, calibrate and detect for every (ratio, mode, seed).

    ``ss-vtcn`` and ``ss-wvtcn`` share one trained model and detection log
    per (ratio, seed); ``ss-wvtcn`` scores the classifier's verdicts with
    rectification switched off.  ``supervised`` trains on the labeled slice
    alone.  A failing cell is recorded and the grid carries on.
    """
    from .pipeline import PipelineSettings, prepare, train_and_detect

    settings = settings or PipelineSettings()
    modes = [canonical_mode(m) for m in modes]
    grid = GridReport(settings.num_classes)

    def emit(cell: GridCell):
        grid.cells.append(cell)
        if progress is not None:
            progress(cell)

    for ratio in ratios:
        try:
            prepared = prepare(records, settings.with_ratio(ratio))
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            for seed in seeds:
                for mode in modes:
                    emit(GridCell(ratio, mode, seed, error=f"{type(exc).__name__}: {exc}"))
            continue
        truth = prepared.test_labels
        for seed in seeds:
            if "ss-vtcn" in modes or "ss-wvtcn" in modes:
                try:
                    results = train_and_detect(prepared, settings, seed, supervised=False).results
                    if "ss-vtcn" in modes:
                        pred = [r.final for r in results]
                        emit(GridCell(ratio, "ss-vtcn", seed, evaluate(truth, pred, settings.num_classes)))
                    if "ss-wvtcn" in modes:
                        pred = [r.without_rectification().final for r in results]
                        emit(GridCell(ratio, "ss-wvtcn", seed, evaluate(truth, pred, settings.num_classes)))
                except Exception as exc:  # noqa: BLE001
                    logger.exception("grid cell ratio=%s seed=%s failed", ratio, seed)
                    for mode in ("ss-vtcn", "ss-wvtcn"):
                        if mode in modes:
                            emit(GridCell(ratio, mode, seed, error=f"{type(exc).__name__}: {exc}"))
            if "supervised" in modes:
                try:
                    results = train_and_detect(prepared, settings, seed, supervised=True).results
                    pred = [r.final for r in results]
                    emit(GridCell(ratio, "supervised", seed, evaluate(truth, pred, settings.num_classes)))
                except Exception as exc:  # noqa: BLE001
                    logger.exception("grid cell ratio=%s seed=%s failed", ratio, seed)
                    emit(GridCell(ratio, "supervised", seed, error=f"{type(exc).__name__}: {exc}"))
    return grid
