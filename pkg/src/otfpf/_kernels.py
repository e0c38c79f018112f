"""Hot inner loops for depthwise 3D convolution.

The channel axis is contiguous, so the ``c`` loops below vectorize; the
row-buffer structure keeps each padded input plane in cache while all
kernel taps that touch it are applied. Pure-numpy fallbacks are kept for
environments without numba (same results, slower).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True, fastmath=True)
def _dw_forward_jit(xp, w, out):
    # xp: (B, Dp, Wp, Hp, C) padded input; w: (k, k, k, C); out: (B, Do, Wo, Ho, C)
    B, Dp, Wp, Hp, C = xp.shape
    k = w.shape[0]
    Do, Wo, Ho = out.shape[1], out.shape[2], out.shape[3]
    row = np.empty((Ho, C), dtype=np.float32)
    for b in range(B):
        for d in range(Do):
            for q in range(Wo):
                for h in range(Ho):
                    for c in range(C):
                        row[h, c] = 0.0
                for i in range(k):
                    for j in range(k):
                        plane = xp[b, d + i, q + j]
                        for l in range(k):
                            wv = w[i, j, l]
                            for h in range(Ho):
                                for c in range(C):
                                    row[h, c] += plane[h + l, c] * wv[c]
                for h in range(Ho):
                    for c in range(C):
                        out[b, d, q, h, c] = row[h, c]
    return out


@njit(cache=True, fastmath=True)
def _dw_grad_weight_jit(xp, gout, gw):
    # gw[i,j,l,c] = sum_{b,d,q,h} xp[b,d+i,q+j,h+l,c] * gout[b,d,q,h,c]
    B, Dp, Wp, Hp, C = xp.shape
    k = gw.shape[0]
    Do, Wo, Ho = gout.shape[1], gout.shape[2], gout.shape[3]
    for b in range(B):
        for d in range(Do):
            for q in range(Wo):
                grow = gout[b, d, q]
                for i in range(k):
                    for j in range(k):
                        plane = xp[b, d + i, q + j]
                        for l in range(k):
                            acc = gw[i, j, l]
                            for h in range(Ho):
                                for c in range(C):
                                    acc[c] += plane[h + l, c] * grow[h, c]
    return gw


def _dw_forward_numpy(xp, w, out):
    B, Dp, Wp, Hp, C = xp.shape
    k = w.shape[0]
    Do, Wo, Ho = out.shape[1], out.shape[2], out.shape[3]
    out[:] = 0.0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out += xp[:, i:i + Do, j:j + Wo, l:l + Ho, :] * w[i, j, l]
    return out


def _dw_grad_weight_numpy(xp, gout, gw):
    k = gw.shape[0]
    Do, Wo, Ho = gout.shape[1], gout.shape[2], gout.shape[3]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gw[i, j, l] += np.einsum(
                    "bdqhc,bdqhc->c",
                    xp[:, i:i + Do, j:j + Wo, l:l + Ho, :],
                    gout,
                )
    return gw


def depthwise_forward(xp: np.ndarray, w: np.ndarray, out: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _dw_forward_jit(xp, w, out)
    return _dw_forward_numpy(xp, w, out)


def depthwise_grad_weight(xp: np.ndarray, gout: np.ndarray, gw: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _dw_grad_weight_jit(xp, gout, gw)
    return _dw_grad_weight_numpy(xp, gout, gw)


def layer_norm_forward(x2, gamma, beta, eps):
    """Returns (out, xhat, inv) over a (rows, C) view; float64 statistics."""
    if HAVE_NUMBA:
        rows, c = x2.shape
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty(rows, dtype=np.float32)
        _ln_forward_jit(x2, gamma, beta, eps, out, xhat, inv)
        return out, xhat, inv
    mu = x2.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.var(x2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x2 - mu.astype(np.float32)) * inv
    return xhat * gamma + beta, xhat, inv[..., 0]


def layer_norm_backward(g2, gamma, xhat, inv):
    """Returns (gx, ggamma, gbeta) matching :func:`layer_norm_forward`."""
    if HAVE_NUMBA:
        gx = np.empty_like(g2)
        ggamma = np.zeros(g2.shape[1], dtype=np.float64)
        gbeta = np.zeros(g2.shape[1], dtype=np.float64)
        _ln_backward_jit(g2, gamma, xhat, inv, gx, ggamma, gbeta)
        return gx, ggamma.astype(np.float32), gbeta.astype(np.float32)
    gxhat = g2 * gamma
    m1 = gxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
    gx = inv[:, None] * (gxhat - m1 - xhat * m2)
    ggamma = (g2 * xhat).sum(axis=0, dtype=np.float64).astype(np.float32)
    gbeta = g2.sum(axis=0, dtype=np.float64).astype(np.float32)
    return gx, ggamma, gbeta


@njit(cache=True, fastmath=True)
def _ln_forward_jit(x2, gamma, beta, eps, out, xhat, inv):
    # x2: (rows, C) contiguous; accumulators run in float64
    rows, C = x2.shape
    for r in range(rows):
        s = 0.0
        for c in range(C):
            s += x2[r, c]
        mu = s / C
        q = 0.0
        for c in range(C):
            d = x2[r, c] - mu
            q += d * d
        denom = q / C + eps
        # a non-finite row must surface as NaN output, not a crash
        if denom > 0.0 and denom < np.inf:
            iv = np.float32(1.0 / np.sqrt(denom))
        else:
            iv = np.float32(np.nan)
        inv[r] = iv
        mu32 = np.float32(mu)
        for c in range(C):
            h = (x2[r, c] - mu32) * iv
            xhat[r, c] = h
            out[r, c] = h * gamma[c] + beta[c]
    return out


@njit(cache=True, fastmath=True)
def _ln_backward_jit(g2, gamma, xhat, inv, gx, ggamma64, gbeta64):
    rows, C = g2.shape
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(C):
            gh = g2[r, c] * gamma[c]
            m1 += gh
            m2 += gh * xhat[r, c]
        m1f = np.float32(m1 / C)
        m2f = np.float32(m2 / C)
        iv = inv[r]
        for c in range(C):
            gh = g2[r, c] * gamma[c]
            gx[r, c] = iv * (gh - m1f - xhat[r, c] * m2f)
            ggamma64[c] += g2[r, c] * xhat[r, c]
            gbeta64[c] += g2[r, c]


@njit(cache=True, fastmath=True)
def _adamw_update_jit(p, g, m, v, beta1, beta2, step_size, decay, eps, inv_sqrt_bc2):
    n = p.size
    pf = p.reshape(n)
    gf = g.reshape(n)
    mf = m.reshape(n)
    vf = v.reshape(n)
    one_m_b1 = np.float32(1.0 - beta1)
    one_m_b2 = np.float32(1.0 - beta2)
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    ss = np.float32(step_size)
    dc = np.float32(decay)
    ep = np.float32(eps)
    isb = np.float32(inv_sqrt_bc2)
    for i in range(n):
        gi = gf[i]
        mf[i] = b1 * mf[i] + one_m_b1 * gi
        vf[i] = b2 * vf[i] + one_m_b2 * gi * gi
        pf[i] = pf[i] * dc - ss * mf[i] / (np.sqrt(vf[i]) * isb + ep)


def adamw_update(p, g, m, v, beta1, beta2, step_size, decay, eps, sqrt_bc2):
    """In-place fused AdamW update; returns the new parameter array."""
    if HAVE_NUMBA:
        _adamw_update_jit(p, g, m, v, beta1, beta2, step_size, decay, eps,
                          1.0 / sqrt_bc2)
        return p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p *= np.float32(decay)
    p -= np.float32(step_size) * m / (np.sqrt(v) / np.float32(sqrt_bc2) + eps)
    return p
