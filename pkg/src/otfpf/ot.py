"""Entropic optimal transport solved by Sinkhorn matrix scaling.

The solver minimizes ``sum(C * P) - eps * H(P)`` over couplings with
prescribed marginals, where ``H(P) = -sum(P * (log P - 1))``. Plain
scaling runs on the Gibbs kernel ``K = exp(-C/eps)``; when ``eps`` is
small relative to the cost scale the updates switch to log-domain
potentials so nothing underflows. All solver arithmetic is float64.

Differentiation happens by unrolling exactly the iterations that were
executed: the recorded potentials are replayed in reverse, so the
gradient is exact for the computed plan (see :func:`sinkhorn_plan`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .autodiff import DTYPE, Tensor, as_tensor, record
from .errors import DataError, NumericalError, ShapeError

_TINY = np.finfo(np.float64).tiny
_LOG_SWITCH_RATIO = 0.02
_NORMALIZATION_INPUT_TOL = 1e-6


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class DiscreteMeasure:
    """Nonnegative weights summing to one.

    Inputs within 1e-6 of unit mass (float32 file round-off) are rescaled
    exactly; anything further off is rejected.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.size < 1:
            raise DataError("measure must have at least one atom")
        if np.any(w < 0):
            raise DataError("measure weights must be nonnegative")
        total = w.sum()
        if not np.isfinite(total) or abs(total - 1.0) > _NORMALIZATION_INPUT_TOL:
            raise DataError(f"measure weights must sum to 1, got {total!r}")
        self.weights = w / total

    @classmethod
    def uniform(cls, n: int) -> "DiscreteMeasure":
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.weights.size


@dataclass
class CostMatrix:
    """Pairwise ground costs on the supports; finite, not necessarily symmetric."""

    values: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.values, dtype=np.float64)
        if c.ndim != 2:
            raise ShapeError(f"cost matrix must be 2-D, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DataError("cost matrix must be finite")
        self.values = c

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class SinkhornConfig:
    epsilon: float = 0.1
    max_iterations: int = 100
    tolerance: float = 1e-6
    log_domain: bool | None = None  # None picks automatically from eps/max|C|
    check_monotone: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DataError(f"epsilon must be > 0, got {self.epsilon}")
        if self.tolerance <= 0:
            raise DataError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise DataError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class TransportPlan:
    """Solved coupling plus solver diagnostics."""

    plan: np.ndarray
    achieved_cost: float
    entropy: float
    iterations_used: int
    marginal_violation: float
    converged: bool
    used_log_domain: bool
    dual_objectives: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# solver core (numpy, float64, optional leading batch axes)
# ---------------------------------------------------------------------------

def _pick_log_domain(C: np.ndarray, eps: float, forced: bool | None) -> bool:
    if forced is not None:
        return forced
    cmax = float(np.abs(C).max(initial=0.0))
    if cmax == 0.0:
        return False
    return eps / cmax < _LOG_SWITCH_RATIO


def _sinkhorn_core(C: np.ndarray, a: np.ndarray, b: np.ndarray, cfg: SinkhornConfig,
                   keep_history: bool = False) -> dict:
    """Run Sinkhorn on ``C`` with shape (..., R, S); returns plan and traces."""
    use_log = _pick_log_domain(C, cfg.epsilon, cfg.log_domain)
    eps = float(cfg.epsilon)
    duals: list[float] = []
    if use_log:
        log_a = np.log(np.maximum(a, _TINY))
        log_b = np.log(np.maximum(b, _TINY))
        M = -C / eps
        psi = np.zeros(C.shape[:-2] + (C.shape[-1],))
        phis, psis = [], [psi]
        lse_rows = logsumexp(M + psi[..., None, :], axis=-1)
        converged = False
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            phi = log_a - lse_rows
            lse_cols = logsumexp(M + phi[..., :, None], axis=-2)
            psi = log_b - lse_cols
            lse_rows = logsumexp(M + psi[..., None, :], axis=-1)
            violation = float(np.abs(np.exp(phi + lse_rows) - a).max())
            if keep_history:
                phis.append(phi)
                psis.append(psi)
            if cfg.check_monotone:
                duals.append(eps * ((phi * a).sum(-1) + (psi * b).sum(-1) - 1.0))
            if violation <= cfg.tolerance:
                converged = True
                break
        P = np.exp(phi[..., :, None] + M + psi[..., None, :])
        return {"plan": P, "iterations": it, "violation": violation,
                "converged": converged, "log_domain": True,
                "phis": phis, "psis": psis, "M": M, "duals": duals}

    K = np.exp(-C / eps)
    v = np.ones(C.shape[:-2] + (C.shape[-1],))
    us, vs = [], [v]
    Kv = np.maximum((K @ v[..., :, None])[..., 0], _TINY)
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        u = a / Kv
        KTu = np.maximum((np.swapaxes(K, -1, -2) @ u[..., :, None])[..., 0], _TINY)
        v = b / KTu
        Kv = np.maximum((K @ v[..., :, None])[..., 0], _TINY)
        violation = float(np.abs(u * Kv - a).max())
        if keep_history:
            us.append(u)
            vs.append(v)
        if cfg.check_monotone:
            lu = np.log(np.maximum(u, _TINY))
            lv = np.log(np.maximum(v, _TINY))
            duals.append(eps * ((lu * a).sum(-1) + (lv * b).sum(-1) - 1.0))
        if violation <= cfg.tolerance:
            converged = True
            break
    P = u[..., :, None] * K * v[..., None, :]
    return {"plan": P, "iterations": it, "violation": violation,
            "converged": converged, "log_domain": False,
            "us": us, "vs": vs, "K": K, "duals": duals}


def _sinkhorn_vjp(core: dict, a: np.ndarray, b: np.ndarray, eps: float,
                  gP: np.ndarray) -> np.ndarray:
    """Gradient of the executed iteration sequence w.r.t. the cost matrix."""
    gP = np.asarray(gP, dtype=np.float64)
    if core["log_domain"]:
        M = core["M"]
        phis, psis = core["phis"], core["psis"]
        P = core["plan"]
        E = gP * P
        gphi = E.sum(-1)
        gpsi = E.sum(-2)
        gM = E.copy()
        for t in range(len(phis) - 1, -1, -1):
            phi_t = phis[t]
            psi_prev = psis[t]  # psis holds [psi_0, psi_1, ...]
            shifted_cols = M + phi_t[..., :, None]
            S = np.exp(shifted_cols - logsumexp(shifted_cols, axis=-2, keepdims=True))
            gM -= S * gpsi[..., None, :]
            gphi = gphi - (S @ gpsi[..., :, None])[..., 0]
            shifted_rows = M + psi_prev[..., None, :]
            R = np.exp(shifted_rows - logsumexp(shifted_rows, axis=-1, keepdims=True))
            gM -= R * gphi[..., :, None]
            gpsi = -(np.swapaxes(R, -1, -2) @ gphi[..., :, None])[..., 0]
            gphi = np.zeros_like(gphi)
        return -gM / eps

    K = core["K"]
    us, vs = core["us"], core["vs"]
    u_T, v_T = us[-1], vs[-1]
    GK = gP * K
    gu = (GK @ v_T[..., :, None])[..., 0]
    gv = (np.swapaxes(GK, -1, -2) @ u_T[..., :, None])[..., 0]
    gK = gP * (u_T[..., :, None] * v_T[..., None, :])
    for t in range(len(us) - 1, -1, -1):
        u_t = us[t]
        v_prev = vs[t]  # vs holds [v_0, v_1, ...]
        v_t = vs[t + 1]
        gs = -gv * v_t * v_t / b
        gK += u_t[..., :, None] * gs[..., None, :]
        gu = gu + (K @ gs[..., :, None])[..., 0]
        gr = -gu * u_t * u_t / a
        gK += gr[..., :, None] * v_prev[..., None, :]
        gv = (np.swapaxes(K, -1, -2) @ gr[..., :, None])[..., 0]
        gu = np.zeros_like(gu)
    return -(gK * K) / eps


# ---------------------------------------------------------------------------
# public solver API
# ---------------------------------------------------------------------------

def _coerce_measure(m) -> DiscreteMeasure:
    return m if isinstance(m, DiscreteMeasure) else DiscreteMeasure(np.asarray(m))


def _coerce_cost(C) -> CostMatrix:
    return C if isinstance(C, CostMatrix) else CostMatrix(np.asarray(C))


def sinkhorn(a, b, C, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Solve the entropy-regularized coupling problem by alternating scaling.

    Scaling stops once the worst row/column marginal deviation drops to
    ``cfg.tolerance`` or after ``cfg.max_iterations`` sweeps; the returned
    plan records which stop fired via ``converged``.
    """
    a = _coerce_measure(a)
    b = _coerce_measure(b)
    C = _coerce_cost(C)
    cfg = cfg or SinkhornConfig()
    n, m = C.shape
    if len(a) != n or len(b) != m:
        raise ShapeError(
            f"marginal sizes ({len(a)}, {len(b)}) do not match cost matrix {C.shape}"
        )
    core = _sinkhorn_core(C.values, a.weights, b.weights, cfg)
    P = core["plan"]
    if not np.all(np.isfinite(P)):
        raise NumericalError("sinkhorn produced a non-finite plan")
    return TransportPlan(
        plan=P,
        achieved_cost=transport_cost(P, C.values),
        entropy=entropy(P),
        iterations_used=core["iterations"],
        marginal_violation=core["violation"],
        converged=core["converged"],
        used_log_domain=core["log_domain"],
        dual_objectives=core["duals"],
    )


def sinkhorn_plan(cost: Tensor, a: np.ndarray, b: np.ndarray,
                  cfg: SinkhornConfig | None = None) -> tuple[Tensor, dict]:
    """Differentiable transport plan for a (possibly batched) cost tensor.

    Returns the float32 plan as a graph tensor whose backward pass replays
    the executed scaling iterations in reverse, plus a diagnostics dict.
    The marginals are treated as constants.
    """
    cost = as_tensor(cost)
    cfg = cfg or SinkhornConfig()
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if cost.shape[-2] != a64.size or cost.shape[-1] != b64.size:
        raise ShapeError(
            f"marginal sizes ({a64.size}, {b64.size}) do not match cost shape {cost.shape}"
        )
    core = _sinkhorn_core(cost.data.astype(np.float64), a64, b64, cfg, keep_history=True)
    info = {
        "iterations": core["iterations"],
        "violation": core["violation"],
        "converged": core["converged"],
        "log_domain": core["log_domain"],
    }
    eps = float(cfg.epsilon)

    def vjp(gP):
        return (_sinkhorn_vjp(core, a64, b64, eps, gP).astype(DTYPE),)

    return record(core["plan"].astype(DTYPE), (cost,), vjp), info


def exact_ot_small(a, b, C) -> tuple[np.ndarray, float]:
    """Unregularized optimal transport on tiny instances via an LP solve.

    Serves as the verification oracle for the scaling solver; rejects
    instances with more than 64 cells. Ties between optimal vertices are
    acceptable: comparisons should use the cost, not the plan.
    """
    a = _coerce_measure(a)
    b = _coerce_measure(b)
    C = _coerce_cost(C)
    n, m = C.shape
    if len(a) != n or len(b) != m:
        raise ShapeError(
            f"marginal sizes ({len(a)}, {len(b)}) do not match cost matrix {C.shape}"
        )
    if n * m > 64:
        raise DataError(f"exact_ot_small limited to n*m <= 64, got {n}x{m}")
    A_eq = np.zeros((n + m - 1, n * m))
    rhs = np.zeros(n + m - 1)
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
        rhs[i] = a.weights[i]
    for j in range(m - 1):  # last column constraint is implied
        A_eq[n + j, j::m] = 1.0
        rhs[n + j] = b.weights[j]
    res = linprog(C.values.reshape(-1), A_eq=A_eq, b_eq=rhs,
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"exact transport LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    return plan, float(res.fun)


def transport_cost(P, C) -> float:
    """Linear transport cost ``sum(C * P)``; rejects negative plan entries."""
    P = np.asarray(P, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if P.shape != C.shape:
        raise ShapeError(f"plan shape {P.shape} does not match cost shape {C.shape}")
    if np.any(P < 0):
        raise DataError("transport plan has negative entries")
    return float((P * C).sum())


def entropy(P) -> float:
    """Plan entropy ``-sum(P * (log P - 1))`` with the 0*log(0) = 0 convention."""
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise DataError("transport plan has negative entries")
    mask = P > 0
    terms = np.zeros_like(P)
    terms[mask] = P[mask] * (np.log(P[mask]) - 1.0)
    return float(-terms.sum())
