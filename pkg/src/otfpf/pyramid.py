"""Feature pyramid fusion and the transport-embedding head over its levels.

The fusion network unifies all pyramid channels with bias-free point-wise
convolutions (bottom-up), upsamples each unified level to the spatial size
of the level below it (top-down), and merges by addition. The embedding
head then reshapes every fused level into a row set, embeds each with its
own transport-embedding parameters, and concatenates the flattened
results, giving a descriptor whose length is independent of the input
volume size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .errors import ShapeError
from .module import Module, trunc_normal
from .ot import SinkhornConfig
from .otem import (AnchorSet, KernelSpec, OtemConfig, ReferenceSet, calibrate,
                   otem_embed)

DEFAULT_CHANNELS = (32, 64, 128, 256)


def _spatial(t: Tensor) -> tuple[int, int, int]:
    return t.shape[-4:-1]


@dataclass
class FeaturePyramid:
    """Four stage features, coarser and wider as the level index grows."""

    levels: tuple[Tensor, Tensor, Tensor, Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"pyramid must have 4 levels, got {len(self.levels)}")
        prev = None
        for i, lv in enumerate(self.levels):
            if lv.ndim not in (4, 5):
                raise ShapeError(f"level {i} must be volumetric, got shape {lv.shape}")
            sp = _spatial(lv)
            if prev is not None and any(s > p for s, p in zip(sp, prev)):
                raise ShapeError(
                    f"level {i} spatial {sp} exceeds previous level {prev}"
                )
            prev = sp

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lv.shape[-1] for lv in self.levels)

    def validate_channels(self, expected=DEFAULT_CHANNELS) -> None:
        if self.channels != tuple(expected):
            raise ShapeError(
                f"pyramid channels {self.channels} do not match expected {tuple(expected)}"
            )


@dataclass
class FusedPyramid:
    """Pyramid after fusion: every level shares the level-1 channel count."""

    levels: tuple[Tensor, Tensor, Tensor, Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"fused pyramid must have 4 levels, got {len(self.levels)}")
        c = self.levels[0].shape[-1]
        for i, lv in enumerate(self.levels):
            if lv.shape[-1] != c:
                raise ShapeError(
                    f"fused level {i} has {lv.shape[-1]} channels, expected {c}"
                )

    @property
    def unified_channels(self) -> int:
        return self.levels[0].shape[-1]


class Fpfn(Module):
    """Bottom-up channel unification + top-down upsample + add merge."""

    def __init__(self, channels=DEFAULT_CHANNELS, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.channels = tuple(channels)
        self.unified = self.channels[0]
        # bias-free so a zero level contributes exactly zero after merging
        self.lateral = [Parameter(trunc_normal(rng, (c, self.unified)))
                        for c in self.channels]

    def __call__(self, pyramid: FeaturePyramid) -> FusedPyramid:
        pyramid.validate_channels(self.channels)
        prime = [ops.pointwise_conv(lv, w)
                 for lv, w in zip(pyramid.levels, self.lateral)]
        fused = []
        for i in range(3):
            up = ops.trilinear_upsample(prime[i + 1], _spatial(prime[i]))
            fused.append(ops.add(prime[i], up))
        fused.append(prime[3])
        return FusedPyramid(tuple(fused))


class OtemLevel(Module):
    """Per-level transport-embedding parameters (no sharing across levels)."""

    def __init__(self, feature_dim: int, n_refs: int, sigma: float,
                 sinkhorn: SinkhornConfig, rng: np.random.Generator,
                 p_anchors: int | None = None):
        cfg = OtemConfig.build(feature_dim, n_refs=n_refs, p_anchors=p_anchors,
                               sigma=sigma, rng=rng, sinkhorn=sinkhorn)
        self.anchors = cfg.anchors.w
        self.references = cfg.references.e_ref
        self.cfg = cfg

    def calibrate(self, rows: np.ndarray, rng: np.random.Generator,
                  resample: bool = True) -> None:
        self.cfg = calibrate(self.cfg, rows, rng, resample=resample)

    def __call__(self, rows: Tensor) -> Tensor:
        return otem_embed(rows, self.cfg)


class OtfpfHead(Module):
    """Apply one transport embedding per fused level and concatenate."""

    def __init__(self, unified_channels: int = 32, n_refs: int = 4,
                 sigma: float = 1.0, epsilon: float = 0.1,
                 max_iterations: int = 100, tolerance: float = 1e-6,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        sk = SinkhornConfig(epsilon=epsilon, max_iterations=max_iterations,
                            tolerance=tolerance)
        self.levels = [OtemLevel(unified_channels, n_refs, sigma, sk, rng)
                       for _ in range(4)]
        self.n_refs = n_refs
        self.unified = unified_channels

    @property
    def output_length(self) -> int:
        return 4 * self.n_refs * self.unified

    def __call__(self, fused: FusedPyramid) -> Tensor:
        pieces = []
        for lv, emb in zip(fused.levels, self.levels):
            rows = _as_row_set(lv)
            e = emb(rows)
            lead = e.shape[:-2]
            pieces.append(e.reshape(lead + (self.n_refs * self.unified,)))
        return ops.concat(pieces, axis=-1)


def _as_row_set(level: Tensor) -> Tensor:
    """Reshape a volumetric level to its flattened spatial row set."""
    if level.ndim == 4:
        d, w, h, c = level.shape
        return level.reshape((d * w * h, c))
    b, d, w, h, c = level.shape
    return level.reshape((b, d * w * h, c))


def fpfn(pyramid: FeaturePyramid, params: Fpfn) -> FusedPyramid:
    """Functional form of the fusion network."""
    return params(pyramid)


def otfpf_module(fused: FusedPyramid, head: OtfpfHead) -> Tensor:
    """Functional form of the per-level embedding concatenation."""
    return head(fused)
