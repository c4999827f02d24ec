"""Versioned little-endian binary checkpoints.

Layout::

    magic      8 bytes  b"SSVTCNCK"
    version    u32
    header     8 x u32  levels, channels, kernel_size, num_classes, window, input_dim, latent_dim, n_params
    sigma      f64
    n_params x
        name_len u16, name utf-8, ndim u8, dims ndim x u32, data prod(dims) x f64
    meta_len   u32, metadata as UTF-8 JSON (sorted keys)
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .model import Model, ModelConfig

MAGIC = b"SSVTCNCK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8I")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, corrupt contents or malformed fields."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Parameters or configuration disagree with what the caller expects."""


def save_checkpoint(model: Model, metadata: dict | None = None) -> bytes:
    cfg = model.config
    params = list(model.named_parameters())
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _HEADER.pack(
            cfg.levels, cfg.channels, cfg.kernel_size, cfg.num_classes,
            cfg.window, cfg.input_dim, cfg.latent_dim, len(params),
        ),
        struct.pack("<d", cfg.sigma),
    ]
    for name, p in params:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    meta = metadata if metadata is not None else model.metadata
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes, expected: ModelConfig | None = None) -> Model:
    """Rebuild a model from :func:`save_checkpoint` bytes.

    If ``expected`` is given, the stored configuration must match it,
    otherwise :class:`CheckpointShapeError` is raised.
    """
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not an SS-VTCN checkpoint (bad magic header)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    levels, channels, kernel, classes, window, u, z, n_params = r.unpack(_HEADER.format)
    (sigma,) = r.unpack("<d")
    try:
        config = ModelConfig(
            input_dim=u, num_classes=classes, window=window, levels=levels,
            channels=channels, kernel_size=kernel, latent_dim=z, sigma=sigma,
        )
    except ValueError as exc:
        raise CheckpointFormatError(f"invalid configuration in header: {exc}") from exc

    state: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("parameter name is not valid UTF-8") from exc
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        state[name] = arr
    (meta_len,) = r.unpack("<I")
    meta_blob = r.take(meta_len)
    (crc,) = r.unpack("<I")
    if zlib.crc32(r.data[: r.pos - 4]) != crc:
        raise CheckpointFormatError("checkpoint checksum mismatch (corrupt file)")
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} unexpected trailing bytes")

    if expected is not None and expected != config:
        diffs = [
            f"{k}: checkpoint {getattr(config, k)} vs expected {getattr(expected, k)}"
            for k in config.__dataclass_fields__
            if getattr(config, k) != getattr(expected, k)
        ]
        raise CheckpointShapeError("checkpoint does not match configuration; " + "; ".join(diffs))

    model = Model.initialize(config, 0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointShapeError(str(exc)) from exc
    try:
        model.metadata = json.loads(meta_blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("metadata block is not valid JSON") from exc
    return model
