"""Pure NumPy implementations of the hot kernels.

These define the reference semantics; the compiled module must agree with
them to float32 rounding.  Outputs keep the input dtype, so the same code
also serves float64 gradient checks.
"""

from __future__ import annotations

import numpy as np

_C = np.float32(np.sqrt(2.0 / np.pi))
_K = np.float32(0.044715)
_NEG = np.float32(-1e30)


def gelu_forward(x: np.ndarray):
    """Tanh-approximated GELU; returns (y, t) with t = tanh(u) for the backward pass."""
    u = _C * (x + _K * x * x * x)
    t = np.tanh(u)
    return (0.5 * x * (1.0 + t)).astype(x.dtype), t.astype(x.dtype)


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    du = _C * (1.0 + 3.0 * _K * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)).astype(x.dtype)


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xc * rstd).astype(x.dtype)
    return (xhat * gamma + beta).astype(x.dtype), xhat, rstd


def layer_norm_backward(g: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gamma: np.ndarray):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    d = xhat.shape[1]
    dx = rstd / d * (d * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True))
    dt = xhat.dtype
    return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)


def softmax_rows(s: np.ndarray, mask=None) -> np.ndarray:
    """Softmax over the last axis of (..., Tq, Tk) scores.

    ``mask`` (broadcastable bool, True = may attend) zeroes disallowed
    entries; a row with no allowed entry comes out all zero.
    """
    if mask is not None:
        mask = np.broadcast_to(mask, s.shape)
        s = np.where(mask, s, _NEG)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    return (e / np.where(tot > 0, tot, 1.0)).astype(s.dtype)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return (p * (dp - (dp * p).sum(axis=-1, keepdims=True))).astype(p.dtype)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2) -> None:
    """In-place Adam step on float32 buffers; ``bc*`` are bias corrections."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(np.float32)


def weighted_auroc(pos_w: np.ndarray, neg_w: np.ndarray) -> float:
    """Mann-Whitney AUROC from per-tie-group positive/negative weights.

    ``pos_w[i]`` and ``neg_w[i]`` are the total weight of positives and
    negatives whose score falls in the i-th distinct score value, groups
    ordered by ascending score.  Ties count one half.
    """
    pos_w = np.asarray(pos_w, dtype=np.float64)
    neg_w = np.asarray(neg_w, dtype=np.float64)
    p_tot = pos_w.sum()
    n_tot = neg_w.sum()
    if p_tot <= 0 or n_tot <= 0:
        return float("nan")
    neg_below = np.cumsum(neg_w) - neg_w
    return float((pos_w * (neg_below + 0.5 * neg_w)).sum() / (p_tot * n_tot))


def bootstrap_aurocs(group: np.ndarray, is_pos: np.ndarray, n_groups: int, idx: np.ndarray) -> np.ndarray:
    """AUROC of each resample row of ``idx`` (B, n) over pre-grouped scores.

    ``group[j]`` is the ascending tie-group rank of sample j.  Rows whose
    resample lacks a class yield NaN.
    """
    b, n = idx.shape
    g = group[idx]
    pos = is_pos[idx].astype(bool)
    out = np.empty(b, dtype=np.float64)
    for r in range(b):
        pw = np.bincount(g[r][pos[r]], minlength=n_groups)
        nw = np.bincount(g[r][~pos[r]], minlength=n_groups)
        out[r] = weighted_auroc(pw, nw)
    return out
