"""Dilated causal temporal convolutional network.

Tensors are laid out time-major per record: a window is ``[T, C]`` and a batch
of windows is ``[B, T, C]``.  Every function here accepts either form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nn_core import Rng, Tensor, init_uniform, make_node, matmul, relu


@dataclass
class ConvLayer:
    """Kernel ``[w, C_in, C_out]``, bias ``[C_out]``; tap ``i`` reads ``x[s - d*i]``."""

    kernel: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 3 or self.kernel.shape[0] < 1:
            raise ValueError(f"kernel must be [w, C_in, C_out], got {self.kernel.shape}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.bias.shape != (self.kernel.shape[2],):
            raise ValueError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def width(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[2]


@dataclass
class ResidualBlock:
    conv1: ConvLayer
    conv2: ConvLayer
    skip: ConvLayer | None = None

    def __post_init__(self):
        needs_skip = self.conv1.in_channels != self.conv2.out_channels
        if needs_skip != (self.skip is not None):
            raise ValueError("skip projection must be present iff channel counts differ")
        if self.conv1.dilation != self.conv2.dilation:
            raise ValueError("both convolutions of a block share one dilation")


@dataclass(frozen=True)
class TcnConfig:
    input_channels: int
    num_classes: int
    levels: int = 8
    channels: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("input_channels", "levels", "channels", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"TcnConfig.{name} must be positive")
        if self.num_classes < 2:
            raise ValueError("TcnConfig.num_classes must be at least 2")

    def dilation(self, level: int) -> int:
        return 2**level


@dataclass
class TcnParams:
    config: TcnConfig
    blocks: list[ResidualBlock]
    head_weight: Tensor  # [channels, M]
    head_bias: Tensor  # [M]

    def named_parameters(self, prefix: str = "tcn"):
        for i, block in enumerate(self.blocks):
            for part in ("conv1", "conv2", "skip"):
                layer = getattr(block, part)
                if layer is None:
                    continue
                yield f"{prefix}.block{i}.{part}.kernel", layer.kernel
                yield f"{prefix}.block{i}.{part}.bias", layer.bias
        yield f"{prefix}.head.weight", self.head_weight
        yield f"{prefix}.head.bias", self.head_bias


@dataclass
class TcnOutput:
    hidden_sequence: Tensor  # [..., T, channels]
    embedding: Tensor  # [..., channels], last timestep
    logits: Tensor  # [..., M]


def receptive_field(config: TcnConfig) -> int:
    """Number of past steps (including the current one) that reach the top output."""
    w = config.kernel_size
    return 1 + sum(2 * (w - 1) * config.dilation(i) for i in range(config.levels))


def _conv_layer(rng: Rng, width: int, c_in: int, c_out: int, dilation: int) -> ConvLayer:
    fan_in = width * c_in
    return ConvLayer(
        kernel=init_uniform(rng.child("kernel"), (width, c_in, c_out), fan_in),
        bias=init_uniform(rng.child("bias"), (c_out,), fan_in),
        dilation=dilation,
    )


def init_tcn(config: TcnConfig, rng: Rng, window_length: int | None = None) -> TcnParams:
    if window_length is not None and receptive_field(config) < window_length:
        warnings.warn(
            f"receptive field {receptive_field(config)} is shorter than window length "
            f"{window_length}; early steps of each window cannot reach the output",
            stacklevel=2,
        )
    blocks = []
    c_in = config.input_channels
    for i in range(config.levels):
        d = config.dilation(i)
        site = rng.child(f"block{i}")
        conv1 = _conv_layer(site.child("conv1"), config.kernel_size, c_in, config.channels, d)
        conv2 = _conv_layer(site.child("conv2"), config.kernel_size, config.channels, config.channels, d)
        skip = None
        if c_in != config.channels:
            skip = _conv_layer(site.child("skip"), 1, c_in, config.channels, 1)
        blocks.append(ResidualBlock(conv1, conv2, skip))
        c_in = config.channels
    head = rng.child("head")
    return TcnParams(
        config=config,
        blocks=blocks,
        head_weight=init_uniform(head.child("weight"), (config.channels, config.num_classes), config.channels),
        head_bias=init_uniform(head.child("bias"), (config.num_classes,), config.channels),
    )


def causal_dilated_conv(x: Tensor, layer: ConvLayer) -> Tensor:
    """Same-length causal convolution with left zero padding of ``(w-1)*d``.

    ``out[s] = bias + sum_i x[s - d*i] @ kernel[i]`` with ``x[<0] = 0``.
    """
    if x.shape[-1] != layer.in_channels:
        raise ValueError(
            f"conv expects {layer.in_channels} input channels, got {x.shape[-1]}"
        )
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, steps, c_in = xd.shape
    w, d = layer.width, layer.dilation
    pad = (w - 1) * d
    padded = np.zeros((batch, steps + pad, c_in))
    padded[:, pad:] = xd
    # cols[b, s, i, :] = x[b, s - d*i, :]
    cols = np.stack([padded[:, pad - d * i : pad - d * i + steps] for i in range(w)], axis=2)
    cols2 = cols.reshape(batch * steps, w * c_in)
    k2 = layer.kernel.data.reshape(w * c_in, layer.out_channels)
    out = (cols2 @ k2 + layer.bias.data).reshape(batch, steps, layer.out_channels)

    def backward_fn(g):
        g2 = g.reshape(batch * steps, layer.out_channels)
        gk = (cols2.T @ g2).reshape(layer.kernel.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ k2.T).reshape(batch, steps, w, c_in)
        gpad = np.zeros_like(padded)
        for i in range(w):
            gpad[:, pad - d * i : pad - d * i + steps] += gcols[:, :, i]
        gx = gpad[:, pad:]
        return (gx[0] if squeeze else gx), gk, gb

    return make_node(out[0] if squeeze else out, (x, layer.kernel, layer.bias), backward_fn)


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    """relu(skip(x) + conv2(relu(conv1(x))))."""
    inner = causal_dilated_conv(relu(causal_dilated_conv(x, block.conv1)), block.conv2)
    shortcut = x if block.skip is None else causal_dilated_conv(x, block.skip)
    return relu(shortcut + inner)


def tcn_forward(window: Tensor, params: TcnParams, window_length: int | None = None) -> TcnOutput:
    window = window if isinstance(window, Tensor) else Tensor(window)
    cfg = params.config
    if window.ndim not in (2, 3):
        raise ValueError(f"window must be [T, u] or [B, T, u], got {window.shape}")
    if window.shape[-1] != cfg.input_channels:
        raise ValueError(
            f"window has {window.shape[-1]} features; the TCN expects u={cfg.input_channels}"
        )
    if window_length is not None and window.shape[-2] != window_length:
        raise ValueError(f"window has {window.shape[-2]} steps; expected W={window_length}")
    h = window
    for block in params.blocks:
        h = residual_block(h, block)
    embedding = h[..., -1, :]
    logits = matmul(embedding, params.head_weight) + params.head_bias
    return TcnOutput(hidden_sequence=h, embedding=embedding, logits=logits)
