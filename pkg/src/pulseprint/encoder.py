"""1D convolutional encoder with inverted-bottleneck blocks, plus MLP heads.

The encoder maps [B, C, L] signal batches to fixed-width embeddings:
a strided stem, a stack of mobile inverted-bottleneck blocks (pointwise
expansion, depthwise convolution, squeeze-excitation gate, pointwise
projection, residual where shapes allow), a pointwise head, and global
average pooling. Heads are two-layer MLPs with batchnorm on the hidden
layer, used for projection (both branches) and prediction (online branch
of the bootstrap framework).

All trainable tensors live in a flat name -> Tensor dict and batchnorm
running statistics in a parallel name -> ndarray dict, so optimizers,
momentum copies, and checkpoints can address state uniformly. State is
always mutated in place through those entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class BlockSpec:
    """One inverted-bottleneck block: output width, depthwise kernel size
    (odd), first-conv stride, expansion ratio, squeeze ratio."""

    out_width: int
    kernel: int = 3
    stride: int = 1
    expansion: int = 4
    se_ratio: float = 0.25

    def validate(self) -> None:
        if self.out_width < 1 or self.expansion < 1 or self.stride < 1:
            raise ValueError(f"invalid block spec {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {self.kernel}")
        if not 0.0 < self.se_ratio <= 1.0:
            raise ValueError(f"se_ratio must lie in (0, 1], got {self.se_ratio}")


@dataclass
class EncoderConfig:
    in_channels: int
    stem_width: int
    blocks: list[BlockSpec]
    embedding_dim: int
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.in_channels < 1 or self.stem_width < 1 or self.embedding_dim < 1:
            raise ValueError("in_channels, stem_width and embedding_dim must be >= 1")
        if not self.blocks:
            raise ValueError("encoder needs at least one block")
        for b in self.blocks:
            b.validate()


@dataclass
class HeadConfig:
    input_dim: int
    hidden_dim: int = 1024
    output_dim: int = 128
    batch_norm: bool = True

    def validate(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("head dims must be >= 1")


def full_encoder(in_channels: int) -> EncoderConfig:
    """Full-scale preset: 16 blocks, widths 16 to 256, kernels alternating
    3/5, six stride-2 reductions counting the stem, 256-wide embedding."""
    stages = [
        (16, 3, 1, 4, 1),
        (24, 3, 2, 4, 2),
        (40, 5, 2, 4, 2),
        (80, 3, 2, 6, 3),
        (112, 5, 2, 6, 3),
        (192, 5, 2, 6, 4),
        (256, 3, 1, 6, 1),
    ]
    blocks = []
    for width, kernel, stride, expansion, repeat in stages:
        for i in range(repeat):
            blocks.append(BlockSpec(width, kernel, stride if i == 0 else 1, expansion))
    return EncoderConfig(in_channels, stem_width=16, blocks=blocks, embedding_dim=256)


def desk_encoder(in_channels: int) -> EncoderConfig:
    """Four blocks, widths capped at 64, 64-wide embedding; sized so a desk
    CPU run finishes in minutes."""
    blocks = [BlockSpec(24, 3, 2, 4), BlockSpec(32, 5, 2, 4),
              BlockSpec(48, 3, 2, 4), BlockSpec(64, 5, 2, 4)]
    return EncoderConfig(in_channels, stem_width=16, blocks=blocks, embedding_dim=64)


def tiny_encoder(in_channels: int) -> EncoderConfig:
    """Two narrow blocks for gradient checks and unit tests."""
    blocks = [BlockSpec(8, 3, 1, 2), BlockSpec(16, 3, 2, 2)]
    return EncoderConfig(in_channels, stem_width=8, blocks=blocks, embedding_dim=16)


def full_head(input_dim: int) -> HeadConfig:
    return HeadConfig(input_dim, hidden_dim=1024, output_dim=128)


def desk_head(input_dim: int) -> HeadConfig:
    return HeadConfig(input_dim, hidden_dim=128, output_dim=32)


def tiny_head(input_dim: int) -> HeadConfig:
    return HeadConfig(input_dim, hidden_dim=16, output_dim=8)


def count_params(module) -> int:
    """Total trainable scalars in a params dict or in anything exposing one."""
    params = module if isinstance(module, dict) else module.params
    return int(sum(t.data.size for t in params.values()))


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class _Registry:
    """Name-addressed owner of parameters and batchnorm buffers."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = Tensor(data.astype(self.dtype, copy=False), requires_grad=True)
        self.params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name}")
        arr = data.astype(self.dtype, copy=True)
        self.buffers[name] = arr
        return arr


class _BatchNorm:
    def __init__(self, reg: _Registry, name: str, channels: int, momentum: float, eps: float):
        self.gamma = reg.param(f"{name}.gamma", np.ones(channels))
        self.beta = reg.param(f"{name}.beta", np.zeros(channels))
        self.mean = reg.buffer(f"{name}.running_mean", np.zeros(channels))
        self.var = reg.buffer(f"{name}.running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        return ad.batchnorm(x, self.gamma, self.beta, self.mean, self.var,
                            training=training, momentum=self.momentum, eps=self.eps,
                            update_stats=update_stats)


class _ConvBN:
    """Bias-free convolution followed by batchnorm; activation is the caller's."""

    def __init__(self, reg: _Registry, rng, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int, groups: int, momentum: float, eps: float):
        fan_in = (c_in // groups) * kernel
        self.w = reg.param(f"{name}.w", _kaiming(rng, (c_out, c_in // groups, kernel), fan_in, reg.dtype))
        self.bn = _BatchNorm(reg, f"{name}.bn", c_out, momentum, eps)
        self.stride = stride
        self.padding = (kernel - 1) // 2
        self.groups = groups

    def __call__(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        h = ad.conv1d(x, self.w, stride=self.stride, padding=self.padding, groups=self.groups)
        return self.bn(h, training, update_stats)


class _SqueezeExcite:
    def __init__(self, reg: _Registry, rng, name: str, channels: int, squeezed: int):
        self.w1 = reg.param(f"{name}.w1", _kaiming(rng, (squeezed, channels), channels, reg.dtype))
        self.b1 = reg.param(f"{name}.b1", np.zeros(squeezed))
        self.w2 = reg.param(f"{name}.w2", _kaiming(rng, (channels, squeezed), squeezed, reg.dtype))
        self.b2 = reg.param(f"{name}.b2", np.zeros(channels))

    def __call__(self, h: Tensor) -> Tensor:
        g = ad.global_avg_pool1d(h)
        g = ad.swish(ad.linear(g, self.w1, self.b1))
        g = ad.sigmoid(ad.linear(g, self.w2, self.b2))
        return ad.mul(h, ad.expand_length(g, h.shape[2]))


class _MBConv:
    def __init__(self, reg: _Registry, rng, name: str, in_width: int, spec: BlockSpec,
                 momentum: float, eps: float):
        expanded = in_width * spec.expansion
        self.expand: Optional[_ConvBN] = None
        if spec.expansion > 1:
            self.expand = _ConvBN(reg, rng, f"{name}.expand", in_width, expanded,
                                  1, 1, 1, momentum, eps)
        self.depthwise = _ConvBN(reg, rng, f"{name}.depthwise", expanded, expanded,
                                 spec.kernel, spec.stride, expanded, momentum, eps)
        squeezed = max(1, int(round(in_width * spec.se_ratio)))
        self.se = _SqueezeExcite(reg, rng, f"{name}.se", expanded, squeezed)
        self.project = _ConvBN(reg, rng, f"{name}.project", expanded, spec.out_width,
                               1, 1, 1, momentum, eps)
        self.use_residual = spec.stride == 1 and in_width == spec.out_width

    def __call__(self, x: Tensor, training: bool, update_stats: bool) -> Tensor:
        h = x
        if self.expand is not None:
            h = ad.swish(self.expand(h, training, update_stats))
        h = ad.swish(self.depthwise(h, training, update_stats))
        h = self.se(h)
        h = self.project(h, training, update_stats)
        if self.use_residual:
            h = ad.add(h, x)
        return h


class Encoder:
    """Signal batches [B, C, L] to embeddings [B, embedding_dim]."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        reg = _Registry(dtype)
        mom, eps = config.bn_momentum, config.bn_eps
        self.stem = _ConvBN(reg, rng, "stem", config.in_channels, config.stem_width,
                            3, 2, 1, mom, eps)
        self.blocks: list[_MBConv] = []
        width = config.stem_width
        for i, spec in enumerate(config.blocks):
            self.blocks.append(_MBConv(reg, rng, f"block{i}", width, spec, mom, eps))
            width = spec.out_width
        self.head = _ConvBN(reg, rng, "head", width, config.embedding_dim, 1, 1, 1, mom, eps)
        self.params = reg.params
        self.buffers = reg.buffers
        self.dtype = dtype

    def forward(self, x: Tensor, training: bool = False,
                update_stats: Optional[bool] = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"encoder expects [B, {self.config.in_channels}, L], got {x.shape}")
        if x.dtype != np.dtype(self.dtype):
            raise ValueError(f"encoder is {np.dtype(self.dtype).name}, input is {x.dtype.name}")
        us = training if update_stats is None else update_stats
        h = ad.swish(self.stem(x, training, us))
        for block in self.blocks:
            h = block(h, training, us)
        h = ad.swish(self.head(h, training, us))
        return ad.global_avg_pool1d(h)


class MLPHead:
    """Two-layer MLP: linear, batchnorm (optional), swish, linear."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        reg = _Registry(dtype)
        self.w1 = reg.param("fc1.w", _kaiming(rng, (config.hidden_dim, config.input_dim),
                                              config.input_dim, dtype))
        self.b1 = None if config.batch_norm else reg.param("fc1.b", np.zeros(config.hidden_dim))
        self.bn = _BatchNorm(reg, "fc1.bn", config.hidden_dim, 0.1, 1e-5) \
            if config.batch_norm else None
        self.w2 = reg.param("fc2.w", _kaiming(rng, (config.output_dim, config.hidden_dim),
                                              config.hidden_dim, dtype))
        self.b2 = reg.param("fc2.b", np.zeros(config.output_dim))
        self.params = reg.params
        self.buffers = reg.buffers
        self.dtype = dtype

    def forward(self, h: Tensor, training: bool = False,
                update_stats: Optional[bool] = None) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.config.input_dim:
            raise ValueError(f"head expects [B, {self.config.input_dim}], got {h.shape}")
        us = training if update_stats is None else update_stats
        z = ad.linear(h, self.w1, self.b1)
        if self.bn is not None:
            z = self.bn(z, training, us)
        return ad.linear(ad.swish(z), self.w2, self.b2)
