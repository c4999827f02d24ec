"""Reconstruction probability, per-class calibration, rectification and
streaming detection."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import DataError, make_windows
from .model import Model, ModelOutput, forward
from .nn_core import no_grad
from .vae import gaussian_log_likelihood

DEFAULT_QUANTILE = 0.05
MIN_CLASS_RECORDS = 5


def recon_probability(output: ModelOutput, raw_x, sigma: float = 1.0):
    """log p(X^_t | X~_t) + log p(x_t | Z_t) under isotropic Gaussians.

    Returns a float for a single record, an array for a batch.
    """
    with no_grad():
        emb = gaussian_log_likelihood(output.embedding.detach(), output.recon_embedding.detach(), sigma)
        raw = gaussian_log_likelihood(np.asarray(raw_x, dtype=float), output.recon_raw.detach(), sigma)
    pv = emb.data + raw.data
    return float(pv) if pv.ndim == 0 else pv


def score_windows(model: Model, windows: np.ndarray, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and p^v for every window, with Z_t = mean.

    Batches are cut at fixed offsets from the first window, so a record's
    scores never depend on windows that come after its batch.
    """
    windows = np.asarray(windows, dtype=np.float64)
    n = len(windows)
    probs = np.empty((n, model.config.num_classes))
    pv = np.empty(n)
    with no_grad():
        for start in range(0, n, batch_size):
            chunk = windows[start : start + batch_size]
            out = forward(model, chunk)
            probs[start : start + len(chunk)] = out.probs.data
            pv[start : start + len(chunk)] = recon_probability(out, chunk[:, -1, :], model.config.sigma)
    return probs, pv


# ---------------------------------------------------------------------------
# Calibration


@dataclass
class ClassIntervals:
    num_classes: int
    q: float
    lo: dict[int, float]
    hi: dict[int, float]
    center: dict[int, float]
    counts: dict[int, int]
    normal_threshold: float

    @property
    def sparse_classes(self) -> list[int]:
        return sorted(c for c, n in self.counts.items() if n < MIN_CLASS_RECORDS)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("lo", "hi", "center", "counts"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ClassIntervals:
        return cls(
            num_classes=int(d["num_classes"]),
            q=float(d["q"]),
            lo={int(k): float(v) for k, v in d["lo"].items()},
            hi={int(k): float(v) for k, v in d["hi"].items()},
            center={int(k): float(v) for k, v in d["center"].items()},
            counts={int(k): int(v) for k, v in d["counts"].items()},
            normal_threshold=float(d["normal_threshold"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> ClassIntervals:
        return cls.from_dict(json.loads(text))


def intervals_from_scores(scores, labels, num_classes: int, q: float = DEFAULT_QUANTILE) -> ClassIntervals:
    """Per-class [q, 1-q] quantile ranges and medians of labeled p^v (linear interpolation)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= q <= 0.5:
        raise ValueError("quantile q must lie in [0, 0.5]")
    if not np.any(labels == 0):
        raise ValueError("calibration needs at least one labeled normal (class 0) record")
    lo, hi, center, counts = {}, {}, {}, {}
    for c in range(num_classes):
        s = scores[labels == c]
        if len(s) == 0:
            continue
        lo[c] = float(np.quantile(s, q))
        hi[c] = float(np.quantile(s, 1.0 - q))
        center[c] = float(np.median(s))
        counts[c] = int(len(s))
    intervals = ClassIntervals(num_classes, q, lo, hi, center, counts, lo[0])
    if intervals.sparse_classes:
        warnings.warn(
            f"classes {intervals.sparse_classes} have fewer than {MIN_CLASS_RECORDS} labeled records; "
            "their p^v intervals are unreliable",
            stacklevel=2,
        )
    return intervals


def calibrate(model: Model, windows: np.ndarray, labels, q: float = DEFAULT_QUANTILE) -> ClassIntervals:
    _, pv = score_windows(model, windows)
    return intervals_from_scores(pv, labels, model.config.num_classes, q)


# ---------------------------------------------------------------------------
# Verdicts


def classify_by_pv(p_v: float, intervals: ClassIntervals) -> int:
    """Class implied by p^v alone.

    At or above the normal threshold the record is normal.  Below it, the
    anomaly class whose interval contains ``p_v``; when several or none do,
    the anomaly class with the nearest median (lowest index on ties).  With
    no calibrated anomaly class the answer stays normal.
    """
    if p_v >= intervals.normal_threshold:
        return 0
    anomalies = sorted(c for c in intervals.center if c >= 1)
    if not anomalies:
        return 0
    inside = [c for c in anomalies if intervals.lo[c] <= p_v <= intervals.hi[c]]
    if len(inside) == 1:
        return inside[0]
    return min(anomalies, key=lambda c: (abs(p_v - intervals.center[c]), c))


def rectify(preliminary: int, pv_class: int) -> tuple[int, bool]:
    """Fuse the classifier's verdict with the p^v verdict.

    ======================  ============  ==========
    classifier / p^v        final         rectified
    ======================  ============  ==========
    normal / normal         normal        no
    normal / anomaly k      k             yes
    anomaly k / anomaly k   k             no
    anomaly k / anomaly j   k             no
    anomaly k / normal      normal        yes
    ======================  ============  ==========
    """
    if preliminary == 0:
        return (0, False) if pv_class == 0 else (pv_class, True)
    if pv_class == 0:
        return 0, True
    return preliminary, False


@dataclass
class DetectionResult:
    preliminary: int
    p_v: float
    pv_class: int
    final: int
    rectified: bool
    index: int = 0
    timestamp: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "timestamp": self.timestamp,
                "preliminary": self.preliminary,
                "p_v": self.p_v,
                "pv_class": self.pv_class,
                "final": self.final,
                "rectified": self.rectified,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> DetectionResult:
        d = json.loads(line)
        return cls(
            preliminary=int(d["preliminary"]),
            p_v=float(d["p_v"]),
            pv_class=int(d["pv_class"]),
            final=int(d["final"]),
            rectified=bool(d["rectified"]),
            index=int(d["index"]),
            timestamp=d.get("timestamp"),
        )

    def without_rectification(self) -> DetectionResult:
        return DetectionResult(self.preliminary, self.p_v, self.pv_class, self.preliminary, False,
                               self.index, self.timestamp)


def _verdict(probs: np.ndarray, p_v: float, intervals: ClassIntervals, rectification: bool,
             index: int, timestamp) -> DetectionResult:
    preliminary = int(np.argmax(probs))
    pv_class = classify_by_pv(p_v, intervals)
    if rectification:
        final, rectified = rectify(preliminary, pv_class)
    else:
        final, rectified = preliminary, False
    return DetectionResult(preliminary, float(p_v), pv_class, final, rectified, index, timestamp)


def detect_one(model: Model, intervals: ClassIntervals, window, raw_x=None, *,
               rectification: bool = True, index: int = 0, timestamp=None) -> DetectionResult:
    """Verdict for one window ``[W, u]``; ``raw_x`` defaults to its last row."""
    window = np.asarray(window, dtype=np.float64)
    if raw_x is None:
        raw_x = window[-1]
    with no_grad():
        out = forward(model, window)
    p_v = recon_probability(out, raw_x, model.config.sigma)
    return _verdict(out.probs.data, p_v, intervals, rectification, index, timestamp)


def detect_stream(
    model: Model,
    intervals: ClassIntervals,
    features: np.ndarray,
    timestamps: Sequence[float] | None = None,
    context: np.ndarray | None = None,
    *,
    rectification: bool = True,
    batch_size: int = 512,
) -> list[DetectionResult]:
    """Verdicts for chronologically ordered encoded records.

    The window for record ``t`` holds only records up to ``t`` (preceded by
    ``context`` rows or zeros), so appending records never changes earlier
    verdicts.
    """
    features = np.asarray(features, dtype=np.float64)
    if timestamps is not None:
        if len(timestamps) != len(features):
            raise ValueError("timestamps and features differ in length")
        for i in range(1, len(timestamps)):
            if timestamps[i] < timestamps[i - 1]:
                raise DataError(f"record {i} is out of timestamp order")
    if len(features) == 0:
        return []
    windows = make_windows(features, model.config.window, context)
    probs, pv = score_windows(model, windows, batch_size)
    return [
        _verdict(probs[i], pv[i], intervals, rectification, i,
                 None if timestamps is None else timestamps[i])
        for i in range(len(features))
    ]
