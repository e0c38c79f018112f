"""Volumetric ConvNeXt-style pathway with overlapped downsampling.

A pathway is a stem followed by four stages; spatial extents halve five
times in total (stem plus three inter-stage reductions happen before the
recorded stages; see :class:`Pathway`). Downsampling runs in one of two
modes: ``overlapped`` uses a k3/s2/p1 convolution whose receptive windows
overlap, ``patchify`` the classical k2/s2/p0 disjoint windows. Between
stages the reduction is norm-then-convolution; the stem convolves first
and normalizes after, since normalizing a single-channel input would
erase it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .module import Module, trunc_normal
from .pyramid import DEFAULT_CHANNELS, FeaturePyramid

DOWNSAMPLE_MODES = ("overlapped", "patchify")
MIN_PATHWAY_EXTENT = 5


@dataclass
class StageConfig:
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 3, 1)
    stage_channels: tuple[int, int, int, int] = DEFAULT_CHANNELS
    downsample_mode: str = "overlapped"
    ds_kernel: int = 3  # overlapped-mode kernel; padding is (k - 1) // 2

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.blocks_per_stage) != 4:
            raise ConfigError(f"blocks_per_stage must have 4 entries, got {self.blocks_per_stage}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage entries must be >= 1, got {self.blocks_per_stage}")
        if len(self.stage_channels) != 4:
            raise ConfigError(f"stage_channels must have 4 entries, got {self.stage_channels}")
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ConfigError(
                f"downsample_mode must be one of {DOWNSAMPLE_MODES}, got {self.downsample_mode!r}"
            )
        if self.ds_kernel < 2:
            raise ConfigError(f"ds_kernel must be >= 2, got {self.ds_kernel}")

    @property
    def stem_channels(self) -> int:
        return self.stage_channels[0]


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Dense(Module):
    """Channel-mixing affine map applied at every spatial location."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (cin, cout)))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pointwise_conv(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator, groups: int = 1, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (k, k, k, cin // groups, cout)))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)


class ConvNeXtBlock(Module):
    """Residual block: depthwise 7^3 -> norm -> expand 4x -> GELU -> project."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.dwconv = Conv3d(channels, channels, k=7, stride=1, padding=3,
                             rng=rng, groups=channels)
        self.norm = LayerNorm(channels)
        self.expand = Dense(channels, 4 * channels, rng)
        self.project = Dense(4 * channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.dwconv(x)
        y = self.norm(y)
        y = ops.gelu(self.expand(y))
        y = self.project(y)
        return ops.add(x, y)


def _mode_geometry(mode: str, ds_kernel: int) -> tuple[int, int]:
    if mode == "overlapped":
        return ds_kernel, (ds_kernel - 1) // 2
    return 2, 0


class Downsample(Module):
    """Norm-then-strided-convolution halving; overlapped or patchify windows."""

    def __init__(self, cin: int, cout: int, mode: str, rng: np.random.Generator,
                 ds_kernel: int = 3):
        if mode not in DOWNSAMPLE_MODES:
            raise ConfigError(f"unknown downsample mode {mode!r}")
        k, p = _mode_geometry(mode, ds_kernel)
        self.norm = LayerNorm(cin)
        self.conv = Conv3d(cin, cout, k=k, stride=2, padding=p, rng=rng)
        self.mode = mode

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(self.norm(x))


class Stem(Module):
    """Initial halving to the first stage width: convolution, then norm."""

    def __init__(self, cin: int, cout: int, mode: str, rng: np.random.Generator,
                 ds_kernel: int = 3):
        k, p = _mode_geometry(mode, ds_kernel)
        self.conv = Conv3d(cin, cout, k=k, stride=2, padding=p, rng=rng)
        self.norm = LayerNorm(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


class Stage(Module):
    def __init__(self, channels: int, n_blocks: int, rng: np.random.Generator):
        self.blocks = [ConvNeXtBlock(channels, rng) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def stage(x: Tensor, params: Stage) -> Tensor:
    """Functional form: apply a stage's blocks in order."""
    return params(x)


def convnext_block(x: Tensor, params: ConvNeXtBlock) -> Tensor:
    """Functional form of one residual block."""
    return params(x)


def downsample(x: Tensor, params: Downsample) -> Tensor:
    """Functional form of one halving reduction."""
    return params(x)


class Pathway(Module):
    """Stem plus four stages, recording each stage output as a pyramid level."""

    def __init__(self, in_channels: int, cfg: StageConfig, rng: np.random.Generator):
        ch = cfg.stage_channels
        self.stem = Stem(in_channels, cfg.stem_channels, cfg.downsample_mode,
                         rng, cfg.ds_kernel)
        self.downs = [Downsample(ch[i], ch[i + 1], cfg.downsample_mode, rng,
                                 cfg.ds_kernel) for i in range(3)]
        self.stages = [Stage(ch[i], cfg.blocks_per_stage[i], rng) for i in range(4)]
        self.cfg = cfg

    def check_input(self, x: Tensor) -> None:
        if x.ndim not in (4, 5):
            raise ShapeError(f"pathway input must be volumetric, got {x.shape}")
        if min(x.shape[-4:-1]) < MIN_PATHWAY_EXTENT:
            raise ShapeError(
                f"pathway input spatial extents {x.shape[-4:-1]} below the minimum "
                f"of {MIN_PATHWAY_EXTENT} needed to survive repeated halving"
            )

    def __call__(self, x: Tensor) -> FeaturePyramid:
        self.check_input(x)
        x = self.stem(x)
        levels = []
        for i in range(4):
            if i > 0:
                x = self.downs[i - 1](x)
            x = self.stages[i](x)
            levels.append(x)
        return FeaturePyramid(tuple(levels))


def pathway(x: Tensor, params: Pathway) -> FeaturePyramid:
    """Functional form: run a volume through stem and stages."""
    return params(x)


class FusionModule(Module):
    """Blend two same-shape feature maps: concat -> norm -> point-wise conv.

    Output channels match one pathway's stage width so the result can be
    added straight into the corresponding stage output.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.norm = LayerNorm(2 * channels)
        self.conv = Dense(2 * channels, channels, rng)

    def __call__(self, gm_feat: Tensor, wm_feat: Tensor) -> Tensor:
        if gm_feat.shape != wm_feat.shape:
            raise ShapeError(
                f"fusion_module: shapes differ, {gm_feat.shape} vs {wm_feat.shape}"
            )
        mixed = ops.concat_channels([gm_feat, wm_feat])
        return self.conv(self.norm(mixed))


def fusion_module(gm_feat: Tensor, wm_feat: Tensor, params: FusionModule) -> Tensor:
    """Functional form of the two-stream fusion."""
    return params(gm_feat, wm_feat)
