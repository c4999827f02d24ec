"""Record ingestion, feature encoding, chronological splits, windows and
synthetic IoT-style traffic."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn_core import Rng

CLASS_NAMES = ("normal", "dos", "malicious", "spying")
DEFAULT_LABEL_MAP = {name: i for i, name in enumerate(CLASS_NAMES)}

# DS2OS-B class counts: 8000 normal, 4315 dos, 2689 malicious, 996 spying of 16000
TABLE2_PRIORS = (8000 / 16000, 4315 / 16000, 2689 / 16000, 996 / 16000)


class DataError(ValueError):
    """Input data that cannot be used as given."""


class EncoderNotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawRecord:
    timestamp: float
    fields: tuple
    label: int | None = None
    line: int | None = None


@dataclass(frozen=True)
class EncodedRecord:
    features: np.ndarray
    label: int | None = None


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    timestamp: str = "timestamp"
    features: tuple[str, ...] | None = None  # None: every column except timestamp and label
    label: str | None = "label"
    categorical: tuple[str, ...] | None = None  # None: detect from training values
    label_map: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_MAP))

    def class_of(self, value: str) -> int | None:
        key = value.strip()
        if key in self.label_map:
            return int(self.label_map[key])
        lowered = {str(k).lower(): v for k, v in self.label_map.items()}
        if key.lower() in lowered:
            return int(lowered[key.lower()])
        if key.lstrip("-").isdigit():
            return int(key)
        return None


@dataclass
class Reject:
    line: int
    reason: str


@dataclass
class CsvLoad:
    records: list[RawRecord]
    rejects: list[Reject]
    feature_names: tuple[str, ...]
    is_sorted: bool

    def write_rejects(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rejects:
                fh.write(json.dumps({"line": r.line, "reason": r.reason}) + "\n")


def parse_timestamp(value: str) -> float:
    value = value.strip()
    try:
        return float(value)
    except ValueError:
        pass
    return datetime.fromisoformat(value).timestamp()


def load_csv(path, schema: CsvSchema = CsvSchema()) -> CsvLoad:
    """Read a UTF-8 CSV with a header row.

    Rows with the wrong field count or an unknown label go into the reject
    report.  A missing column or an unparseable timestamp is fatal.  Row
    order is kept; ``is_sorted`` reports whether timestamps are monotone.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        needed = [schema.timestamp] + ([schema.label] if schema.label else [])
        if schema.features is not None:
            needed += list(schema.features)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {missing}")
        features = schema.features or tuple(c for c in header if c not in needed)
        ts_idx = header.index(schema.timestamp)
        label_idx = header.index(schema.label) if schema.label else None
        feat_idx = [header.index(c) for c in features]

        records: list[RawRecord] = []
        rejects: list[Reject] = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                rejects.append(Reject(line, f"expected {len(header)} fields, found {len(row)}"))
                continue
            try:
                ts = parse_timestamp(row[ts_idx])
            except ValueError:
                raise DataError(f"{path}: unparseable timestamp {row[ts_idx]!r} at line {line}") from None
            label = None
            if label_idx is not None:
                label = schema.class_of(row[label_idx])
                if label is None:
                    rejects.append(Reject(line, f"unknown label {row[label_idx]!r}"))
                    continue
            records.append(RawRecord(ts, tuple(row[i] for i in feat_idx), label, line))
    ts = [r.timestamp for r in records]
    is_sorted = all(a <= b for a, b in zip(ts, ts[1:]))
    return CsvLoad(records, rejects, tuple(features), is_sorted)


def write_csv(path, records: Sequence[RawRecord], feature_names: Sequence[str], **columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_csv_stream(fh, records, feature_names, **columns)


def write_csv_stream(
    fh,
    records: Sequence[RawRecord],
    feature_names: Sequence[str],
    timestamp: str = "timestamp",
    label: str = "label",
    label_names: Sequence[str] = CLASS_NAMES,
) -> None:
    """Header ``timestamp, features..., label``; labels written as ``label_names[c]``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([timestamp, *feature_names, label])
    for r in records:
        w.writerow([_fmt(r.timestamp), *(_fmt(v) for v in r.fields), _label_name(r.label, label_names)])


def csv_header(path) -> list[str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _label_name(label: int | None, names: Sequence[str] = CLASS_NAMES) -> str:
    if label is None:
        return ""
    return names[label] if label < len(names) else str(label)


def _fmt(v) -> str:
    if isinstance(v, float):
        return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# Encoding


def _is_number(value) -> bool:
    if isinstance(value, (int, float)):
        return True
    try:
        float(value)
        return True
    except (TypeError, ValueError):
        return False


@dataclass
class Encoder:
    """Ordinal codes for categorical columns, then z-scores for every column.

    Categories are coded by descending training frequency starting at 1;
    code 0 is reserved for values never seen in training.
    """

    kinds: list[str] = field(default_factory=list)  # "numeric" | "categorical"
    vocab: list[dict[str, int]] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    @property
    def width(self) -> int:
        return len(self.kinds)

    def _raw(self, fields) -> np.ndarray:
        if len(fields) != self.width:
            raise DataError(f"record has {len(fields)} fields; encoder expects {self.width}")
        out = np.empty(self.width)
        for j, (kind, v) in enumerate(zip(self.kinds, fields)):
            if kind == "categorical":
                out[j] = self.vocab[j].get(str(v).strip(), 0)
            else:
                try:
                    out[j] = float(v)
                except (TypeError, ValueError):
                    raise DataError(f"non-numeric value {v!r} in numeric column {j}") from None
        return out

    def transform(self, records: Sequence[RawRecord]) -> np.ndarray:
        if not self.fitted:
            raise EncoderNotFittedError("encoder used before fit_encoder")
        if not records:
            return np.empty((0, self.width))
        raw = np.stack([self._raw(r.fields) for r in records])
        safe = np.where(self.std > 0, self.std, 1.0)
        z = (raw - self.mean) / safe
        z[:, self.std == 0] = 0.0
        return z

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "vocab": [dict(v) for v in self.vocab],
            "mean": None if self.mean is None else self.mean.tolist(),
            "std": None if self.std is None else self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Encoder:
        return cls(
            kinds=list(d["kinds"]),
            vocab=[{str(k): int(v) for k, v in m.items()} for m in d["vocab"]],
            mean=None if d["mean"] is None else np.asarray(d["mean"], dtype=float),
            std=None if d["std"] is None else np.asarray(d["std"], dtype=float),
        )


def fit_encoder(records: Sequence[RawRecord], categorical: Sequence[int] | None = None) -> Encoder:
    """Fit on training records only.

    ``categorical`` lists column positions to treat as categorical; when
    omitted, a column is categorical if any training value is non-numeric.
    """
    if not records:
        raise DataError("cannot fit an encoder on zero records")
    width = len(records[0].fields)
    columns = list(zip(*(r.fields for r in records)))
    if len(columns) != width or any(len(r.fields) != width for r in records):
        raise DataError("records disagree on field count")
    if categorical is None:
        cat = {j for j, col in enumerate(columns) if not all(_is_number(v) for v in col)}
    else:
        cat = set(categorical)
    enc = Encoder(
        kinds=["categorical" if j in cat else "numeric" for j in range(width)],
        vocab=[{} for _ in range(width)],
    )
    for j in cat:
        counts = Counter(str(v).strip() for v in columns[j])
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        enc.vocab[j] = {value: code for code, (value, _) in enumerate(ranked, start=1)}
    raw = np.stack([enc._raw(r.fields) for r in records])
    enc.mean = raw.mean(axis=0)
    enc.std = raw.std(axis=0)
    return enc


def encode(encoder: Encoder, record: RawRecord) -> EncodedRecord:
    return EncodedRecord(encoder.transform([record])[0], record.label)


# ---------------------------------------------------------------------------
# Splits and windows


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    labeled_fraction: float = 0.4
    num_classes: int = 4

    def __post_init__(self):
        for name in ("train_fraction", "labeled_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


@dataclass
class Split:
    labeled: list[RawRecord]
    unlabeled: list[RawRecord]  # labels stripped
    test: list[RawRecord]
    unlabeled_truth: list[int | None]  # hidden labels, for scoring only

    @property
    def train(self) -> list[RawRecord]:
        return self.labeled + self.unlabeled


def _floor_fraction(n: int, fraction: float) -> int:
    return min(n, int(math.floor(n * fraction + 1e-9)))


def chronological_split(records: Sequence[RawRecord], spec: SplitSpec) -> Split:
    """Earliest ``train_fraction`` trains; its earliest ``labeled_fraction`` keeps labels."""
    for i in range(1, len(records)):
        if records[i].timestamp < records[i - 1].timestamp:
            raise DataError(f"records are not in timestamp order (index {i})")
    n_train = _floor_fraction(len(records), spec.train_fraction)
    n_lab = _floor_fraction(n_train, spec.labeled_fraction)
    train = list(records[:n_train])
    unlabeled = train[n_lab:]
    return Split(
        labeled=train[:n_lab],
        unlabeled=[replace(r, label=None) for r in unlabeled],
        test=list(records[n_train:]),
        unlabeled_truth=[r.label for r in unlabeled],
    )


def make_windows(features: np.ndarray, window: int, context: np.ndarray | None = None) -> np.ndarray:
    """One ``[window, u]`` slice per record ending at that record.

    Rows before the first record are taken from ``context`` (records that
    precede ``features`` in time) and otherwise zero-filled.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    n, u = features.shape
    lead = np.zeros((window - 1, u))
    if context is not None and len(context) and window > 1:
        ctx = np.asarray(context, dtype=np.float64)[-(window - 1) :]
        lead[window - 1 - len(ctx) :] = ctx
    padded = np.concatenate([lead, features])
    view = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)  # [n, u, W]
    return np.ascontiguousarray(view.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# Synthetic traffic


@dataclass(frozen=True)
class SynthConfig:
    records: int = 10_000
    priors: tuple[float, ...] = TABLE2_PRIORS
    seed: int = 7
    features: int = 11  # u, including one categorical "op" column
    ar_coefficient: float = 0.9
    dos_scale: float = 3.0
    malicious_offset: float = 2.0
    spying_amplitude: float = 0.8
    spying_period: int = 4
    episode_means: tuple[float, ...] = (24.0, 12.0, 10.0, 8.0)

    def __post_init__(self):
        if self.records < 0:
            raise ValueError("record count must be non-negative")
        if len(self.priors) != len(CLASS_NAMES) or any(p < 0 for p in self.priors):
            raise ValueError("priors need four non-negative entries (normal, dos, malicious, spying)")
        if abs(sum(self.priors) - 1.0) > 1e-3:
            raise ValueError(f"priors must sum to 1, got {sum(self.priors)}")
        if self.features < 7:
            raise ValueError("synthetic traffic needs at least 7 feature columns")


def synth_feature_names(u: int = 11) -> tuple[str, ...]:
    numeric = ["rate_0", "rate_1", "rate_2", "value_0", "value_1", "signal_0"]
    numeric += [f"aux_{i}" for i in range(u - 1 - len(numeric))]
    return tuple(numeric + ["op"])


_OPS = ("read", "write", "subscribe")
_OP_PROBS = {0: (0.7, 0.2, 0.1), 2: (0.25, 0.65, 0.1)}


def _class_sequence(cfg: SynthConfig, rng: Rng) -> np.ndarray:
    priors = np.asarray(cfg.priors, dtype=float)
    priors = priors / priors.sum()
    counts = rng.child("counts").multinomial(cfg.records, priors)
    ep_rng = rng.child("episodes")
    episodes: list[tuple[int, int]] = []
    for c in range(1, len(priors)):
        left = int(counts[c])
        while left > 0:
            length = min(left, int(ep_rng.geometric(1.0 / cfg.episode_means[c])))
            episodes.append((c, length))
            left -= length
    order = rng.child("order").permutation(len(episodes))
    gaps = rng.child("gaps").multinomial(int(counts[0]), np.full(len(episodes) + 1, 1.0 / (len(episodes) + 1)))
    labels = []
    for k, idx in enumerate(order):
        labels += [0] * int(gaps[k])
        c, length = episodes[idx]
        labels += [c] * length
    labels += [0] * int(gaps[-1])
    return np.asarray(labels, dtype=np.int64)


def synth_generate(cfg: SynthConfig = SynthConfig()) -> list[RawRecord]:
    """Labeled synthetic stream with the four DS2OS-B traffic classes.

    Normal traffic is a stationary AR(1) process per numeric column.
    Anomalies arrive as contiguous episodes of geometric length:

    * dos: the three rate columns are multiplied by ``dos_scale``
    * malicious: the two value columns shift by ``malicious_offset`` and
      writes dominate the categorical op column
    * spying: a low-amplitude square wave of period ``spying_period`` on
      the signal column

    Class counts are multinomial in ``priors``.
    """
    rng = Rng(cfg.seed).child("synth")
    if cfg.records == 0:
        return []
    labels = _class_sequence(cfg, rng)
    n_num = cfg.features - 1
    phi = cfg.ar_coefficient
    innov = rng.child("ar").normal(size=(cfg.records, n_num)) * math.sqrt(1.0 - phi * phi)
    ar = np.empty_like(innov)
    ar[0] = rng.child("ar0").normal(size=n_num)
    for t in range(1, cfg.records):
        ar[t] = phi * ar[t - 1] + innov[t]

    x = ar.copy()
    x[:, 0:3] = 2.0 + 0.5 * ar[:, 0:3]  # rates stay positive in practice
    x[:, 5] = 0.5 * ar[:, 5]
    dos = labels == 1
    x[dos, 0:3] *= cfg.dos_scale
    x[labels == 2, 3:5] += cfg.malicious_offset
    spy = labels == 3
    phase = np.arange(cfg.records) % cfg.spying_period
    wave = np.where(phase < cfg.spying_period / 2, 1.0, -1.0)
    x[spy, 5] += cfg.spying_amplitude * wave[spy]

    u_op = rng.child("op").uniform(size=cfg.records)
    normal_cdf = np.cumsum(_OP_PROBS[0])
    mal_cdf = np.cumsum(_OP_PROBS[2])
    op_idx = np.where(labels == 2, np.searchsorted(mal_cdf, u_op), np.searchsorted(normal_cdf, u_op))
    op_idx = np.minimum(op_idx, len(_OPS) - 1)

    x = np.round(x, 6)
    return [
        RawRecord(
            timestamp=float(1_500_000_000_000 + 1000 * t),
            fields=tuple(float(v) for v in x[t]) + (_OPS[op_idx[t]],),
            label=int(labels[t]),
        )
        for t in range(cfg.records)
    ]
