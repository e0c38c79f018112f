"""Optimal-transport set embedding.

A variable-size set of feature vectors is mapped to a fixed ``n x p``
representation in three steps: embed every row into a finite kernel
feature space ``psi(x) = kappa(x, W) kappa(W, W)^{-1/2}`` built on anchor
rows ``W``; solve an entropic transport problem between the embedded rows
(uniform mass ``1/m``) and ``n`` learnable reference rows (mass ``1/n``)
under squared Euclidean ground cost; pool the embedded rows with the
transport plan, scaled by ``sqrt(n)``. Output size depends only on the
configuration, never on the input row count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from . import ops
from .autodiff import DTYPE, Parameter, Tensor, as_tensor, record
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .ot import SinkhornConfig, sinkhorn_plan

logger = logging.getLogger(__name__)

_EIG_CLAMP = 1e-8
_MIN_ANCHOR_DISTANCE = 1e-6


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass
class KernelSpec:
    kind: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ConfigError(f"unsupported kernel kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ConfigError(f"kernel bandwidth must be > 0, got {self.bandwidth}")


@dataclass
class AnchorSet:
    """Anchor rows spanning the kernel feature subspace; learnable."""

    w: Parameter

    def __post_init__(self):
        if self.w.ndim != 2:
            raise ConfigError(f"anchors must be a 2-D row matrix, got {self.w.shape}")

    @property
    def count(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def random(cls, count: int, dim: int, rng: np.random.Generator,
               name: str = "anchors") -> "AnchorSet":
        for _ in range(16):
            w = rng.standard_normal((count, dim)).astype(DTYPE)
            if count < 2 or pdist(w).min() > _MIN_ANCHOR_DISTANCE:
                return cls(Parameter(w, name))
        raise ConfigError("could not draw pairwise-distinct anchors")


@dataclass
class ReferenceSet:
    """Transport reference rows in the kernel feature space; learnable."""

    e_ref: Parameter

    def __post_init__(self):
        if self.e_ref.ndim != 2:
            raise ConfigError(f"references must be a 2-D row matrix, got {self.e_ref.shape}")
        if not np.all(np.isfinite(self.e_ref.data)):
            raise DataError("reference rows must be finite")

    @property
    def count(self) -> int:
        return self.e_ref.shape[0]

    @property
    def dim(self) -> int:
        return self.e_ref.shape[1]

    @classmethod
    def random(cls, count: int, dim: int, rng: np.random.Generator,
               name: str = "references") -> "ReferenceSet":
        return cls(Parameter(rng.standard_normal((count, dim)).astype(DTYPE), name))


@dataclass
class OtemConfig:
    kernel: KernelSpec
    anchors: AnchorSet
    references: ReferenceSet
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if self.references.dim != self.anchors.count:
            raise ConfigError(
                f"reference dim {self.references.dim} must equal anchor count "
                f"{self.anchors.count} (the kernel feature dimension)"
            )

    @classmethod
    def build(cls, feature_dim: int, n_refs: int = 4, p_anchors: int | None = None,
              sigma: float = 1.0, rng: np.random.Generator | None = None,
              sinkhorn: SinkhornConfig | None = None,
              name_prefix: str = "otem") -> "OtemConfig":
        rng = rng or np.random.default_rng(0)
        p = feature_dim if p_anchors is None else p_anchors
        return cls(
            kernel=KernelSpec(bandwidth=sigma),
            anchors=AnchorSet.random(p, feature_dim, rng, f"{name_prefix}.anchors"),
            references=ReferenceSet.random(n_refs, p, rng, f"{name_prefix}.references"),
            sinkhorn=sinkhorn or SinkhornConfig(),
        )

    @property
    def output_shape(self) -> tuple[int, int]:
        return (self.references.count, self.anchors.count)


# ---------------------------------------------------------------------------
# kernel machinery
# ---------------------------------------------------------------------------

def _squared_distances(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between row sets (broadcasts batch)."""
    x2 = ops.mul(x, x).sum(axis=-1, keepdims=True)
    y2 = ops.mul(y, y).sum(axis=-1)
    cross = ops.matmul(x, ops.swap_last_axes(y))
    return x2 + y2 - ops.mul(cross, 2.0)


def gaussian_kernel(x, y, sigma: float) -> Tensor:
    """Gram matrix ``exp(-||x_i - y_j||^2 / (2 sigma^2))``."""
    if sigma <= 0:
        raise DataError(f"gaussian_kernel: sigma must be > 0, got {sigma}")
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(
            f"gaussian_kernel: feature dims differ, {x.shape} vs {y.shape}"
        )
    d2 = _squared_distances(x, y)
    return ops.exp(ops.mul(d2, -0.5 / (sigma * sigma)))


def matrix_inv_sqrt(g: Tensor, clamp: float = _EIG_CLAMP) -> Tensor:
    """Inverse square root of a symmetric PSD matrix via its eigensystem.

    Eigenvalues are clamped below at ``clamp`` so coincident anchors cannot
    blow the spectrum up; a clamped (degenerate) Gram is reported through a
    log warning, not an error.
    """
    g = as_tensor(g)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"matrix_inv_sqrt: expected a square matrix, got {g.shape}")
    gd = g.data.astype(np.float64)
    if not np.all(np.isfinite(gd)):
        raise NumericalError("matrix_inv_sqrt: input matrix has non-finite entries")
    asym = np.abs(gd - gd.T).max(initial=0.0)
    if asym > 1e-6:
        raise ShapeError(f"matrix_inv_sqrt: matrix asymmetric by {asym:.2e} (> 1e-6)")
    sym = 0.5 * (gd + gd.T)
    lam, q = np.linalg.eigh(sym)
    if lam.min() < clamp:
        logger.warning("matrix_inv_sqrt: clamping %d eigenvalue(s) below %.1e",
                       int((lam < clamp).sum()), clamp)
    lam_c = np.maximum(lam, clamp)
    f = lam_c ** -0.5
    out = (q * f) @ q.T

    def vjp(gout):
        gbar = 0.5 * (gout.astype(np.float64) + gout.T.astype(np.float64))
        # divided differences of f over the (clamped) spectrum
        df = np.where(lam > clamp, -0.5 * lam_c ** -1.5, 0.0)
        num = f[:, None] - f[None, :]
        den = lam[:, None] - lam[None, :]
        close = np.abs(den) < 1e-9
        fmat = np.where(close, 0.5 * (df[:, None] + df[None, :]),
                        num / np.where(close, 1.0, den))
        inner = q.T @ gbar @ q
        gsym = q @ (inner * fmat) @ q.T
        return (0.5 * (gsym + gsym.T).astype(DTYPE),)

    return record(out.astype(DTYPE), (g,), vjp)


def nystrom_embed(x, anchors: AnchorSet, kernel: KernelSpec) -> Tensor:
    """Finite kernel features ``kappa(x, W) kappa(W, W)^{-1/2}``, one row per input."""
    x = as_tensor(x)
    if x.shape[-1] != anchors.dim:
        raise ShapeError(
            f"nystrom_embed: feature dim {x.shape[-1]} does not match anchors {anchors.dim}"
        )
    gram = gaussian_kernel(anchors.w, anchors.w, kernel.bandwidth)
    inv_sqrt = matrix_inv_sqrt(gram)
    kxw = gaussian_kernel(x, anchors.w, kernel.bandwidth)
    return ops.matmul(kxw, inv_sqrt)


# ---------------------------------------------------------------------------
# the embedding itself
# ---------------------------------------------------------------------------

def otem_embed_with_info(features, cfg: OtemConfig) -> tuple[Tensor, dict]:
    """Embed an ``m x C`` row set (optionally batched) to ``n x p``.

    Returns the embedding and the transport solver diagnostics; a
    non-converged solve still yields the best iterate, flagged in the
    diagnostics.
    """
    x = as_tensor(features)
    if x.ndim < 2:
        raise ShapeError(f"otem_embed: expected an m x C row set, got {x.shape}")
    m = x.shape[-2]
    if m < 1:
        raise ShapeError("otem_embed: need at least one input row")
    n = cfg.references.count
    psi = nystrom_embed(x, cfg.anchors, cfg.kernel)
    cost = _squared_distances(psi, cfg.references.e_ref)
    a = np.full(m, 1.0 / m)
    b = np.full(n, 1.0 / n)
    plan, info = sinkhorn_plan(cost, a, b, cfg.sinkhorn)
    if not info["converged"]:
        logger.warning("otem_embed: transport solve stopped at max_iterations=%d "
                       "(violation %.2e)", info["iterations"], info["violation"])
    pooled = ops.matmul(ops.swap_last_axes(plan), psi)
    return ops.mul(pooled, float(np.sqrt(n))), info


def otem_embed(features, cfg: OtemConfig) -> Tensor:
    """Embedding only; see :func:`otem_embed_with_info` for diagnostics."""
    out, _ = otem_embed_with_info(features, cfg)
    return out


# ---------------------------------------------------------------------------
# data-driven calibration
# ---------------------------------------------------------------------------

def median_pairwise_distance(rows: np.ndarray, cap: int = 512) -> float:
    """Median Euclidean distance between rows (deterministically subsampled)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        return 0.0
    if rows.shape[0] > cap:
        idx = np.linspace(0, rows.shape[0] - 1, cap).astype(int)
        rows = rows[idx]
    d = pdist(rows)
    return float(np.median(d)) if d.size else 0.0


def calibrate(cfg: OtemConfig, feature_rows: np.ndarray,
              rng: np.random.Generator, resample: bool = True) -> OtemConfig:
    """Fit the kernel bandwidth (and optionally anchors/references) to data.

    The bandwidth becomes the median pairwise distance pooled over feature
    rows and current anchors (falling back to 1 when degenerate), which
    keeps randomly initialized anchors within kernel range of the data.
    With ``resample`` the anchors are re-seeded from jittered feature rows
    and the references from the embedded rows, so the transport starts in
    a responsive regime. Parameters are updated in place; the returned
    config carries the new bandwidth.
    """
    rows = np.asarray(feature_rows, dtype=DTYPE)
    if rows.ndim != 2 or rows.shape[1] != cfg.anchors.dim:
        raise ShapeError(
            f"calibrate: expected rows of dim {cfg.anchors.dim}, got {rows.shape}"
        )
    pooled = np.concatenate([rows, cfg.anchors.w.data], axis=0)
    sigma = median_pairwise_distance(pooled)
    if sigma <= 0:
        sigma = 1.0
    if resample and rows.shape[0] >= 1:
        p = cfg.anchors.count
        jitter_scale = 0.05 * sigma
        for _ in range(16):
            idx = rng.integers(0, rows.shape[0], size=p)
            w = rows[idx] + jitter_scale * rng.standard_normal((p, cfg.anchors.dim)).astype(DTYPE)
            if p < 2 or pdist(w).min() > _MIN_ANCHOR_DISTANCE:
                cfg.anchors.w.data = w.astype(DTYPE)
                break
        new_cfg = replace(cfg, kernel=KernelSpec(bandwidth=sigma))
        from .autodiff import no_grad
        with no_grad():
            psi = nystrom_embed(Tensor(rows), new_cfg.anchors, new_cfg.kernel).data
        ridx = rng.integers(0, psi.shape[0], size=cfg.references.count)
        refs = psi[ridx] + 0.01 * rng.standard_normal(
            (cfg.references.count, psi.shape[1])).astype(DTYPE)
        cfg.references.e_ref.data = refs.astype(DTYPE)
        return new_cfg
    return replace(cfg, kernel=KernelSpec(bandwidth=sigma))
