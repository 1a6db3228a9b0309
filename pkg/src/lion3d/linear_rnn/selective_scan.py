"""Diagonal selective state-space scan (Mamba-style).

For each group and step t, with x'_t = x_t W_in:

    delta_t = softplus(x'_t W_dt + b_dt)           per channel
    A_t     = exp(delta_t * a),  a = -exp(A_log)   (C, S), in (0, 1)
    h_t     = A_t * h_{t-1} + (delta_t * x'_t) B_t (C, S)
    y_t     = h_t C_t + D * x'_t
    out_t   = (y_t * silu(x_t W_gate)) W_out

with B_t = x'_t W_B and C_t = x'_t W_C. Inputs are (groups, T, C).
"""
import numpy as np

from ._math import pair_sum, sigmoid, softplus


def _prepare(x, w):
    xp = x @ w["in_proj"]
    z = x @ w["gate_proj"]
    dt_pre = xp @ w["dt_proj"] + w["dt_bias"]
    delta = softplus(dt_pre)
    Bm = xp @ w["B_proj"]
    Cm = xp @ w["C_proj"]
    a = -np.exp(w["A_log"])
    log_decay = delta[..., None] * a
    u = (delta * xp)[..., None] * Bm[..., None, :]
    return xp, z, dt_pre, delta, Bm, Cm, a, log_decay, u


def _sequential(decay, u):
    h = np.empty_like(u)
    T = u.shape[1]
    if T == 0:
        return h
    h[:, 0] = u[:, 0]
    for t in range(1, T):
        np.multiply(decay[:, t], h[:, t - 1], out=h[:, t])
        h[:, t] += u[:, t]
    return h


def _chunked(log_decay, u, chunk):
    G, T, C, S = u.shape
    h = np.empty_like(u)
    state = np.zeros((G, C, S))
    for t0 in range(0, T, chunk):
        t1 = min(t0 + chunk, T)
        cum = np.cumsum(log_decay[:, t0:t1], axis=1)
        diff = cum[:, :, None] - cum[:, None, :]
        q = t1 - t0
        causal = np.tril(np.ones((q, q), bool))[None, :, :, None, None]
        weights = np.exp(np.where(causal, diff, -np.inf))
        h[:, t0:t1] = np.einsum("gtscn,gscn->gtcn", weights, u[:, t0:t1]) + np.exp(cum) * state[:, None]
        state = h[:, t1 - 1]
    return h


def _finish(h, xp, z, Cm, w):
    y = (h @ Cm[..., None])[..., 0] + w["D"] * xp
    sz = sigmoid(z)
    gate = z * sz
    g = y * gate
    return y, sz, gate, g, g @ w["out_proj"]


def forward(x, w, chunk_size=None):
    xp, z, _, _, _, Cm, _, log_decay, u = _prepare(x, w)
    if chunk_size:
        h = _chunked(log_decay, u, chunk_size)
    else:
        h = _sequential(np.exp(log_decay), u)
    return _finish(h, xp, z, Cm, w)[-1]


def hidden_states(x, w):
    xp, z, _, _, _, Cm, _, log_decay, u = _prepare(x, w)
    return _sequential(np.exp(log_decay), u)


def vjp(x, w):
    xp, z, dt_pre, delta, Bm, Cm, a, log_decay, u = _prepare(x, w)
    decay = np.exp(log_decay)
    h = _sequential(decay, u)
    y, sz, gate, g, out = _finish(h, xp, z, Cm, w)

    def pullback(dout):
        G, T, C = x.shape
        grads = {}
        grads["out_proj"] = pair_sum(g, dout)
        dg = dout @ w["out_proj"].T
        dy = dg * gate
        dz = dg * y * (sz * (1.0 + z * (1.0 - sz)))
        grads["D"] = np.einsum("gtc,gtc->c", dy, xp)
        dxp = dy * w["D"]
        dCm = (dy[..., None, :] @ h)[..., 0, :]

        src = dy[..., None] * Cm[..., None, :]
        dh = np.empty_like(h)
        dh[:, T - 1] = src[:, T - 1]
        for t in range(T - 2, -1, -1):
            np.multiply(decay[:, t + 1], dh[:, t + 1], out=dh[:, t])
            dh[:, t] += src[:, t]

        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        dlog = dh * h_prev * decay
        ddelta = (dlog * a).sum(axis=-1)
        da = np.einsum("gtcs,gtc->cs", dlog, delta)
        grads["A_log"] = da * a

        du_c = (dh @ Bm[..., None])[..., 0]
        dBm = ((delta * xp)[..., None, :] @ dh)[..., 0, :]
        ddelta += du_c * xp
        dxp += du_c * delta

        ddt = ddelta * sigmoid(dt_pre)
        grads["dt_proj"] = pair_sum(xp, ddt)
        grads["dt_bias"] = ddt.sum(axis=(0, 1))
        dxp += ddt @ w["dt_proj"].T
        grads["B_proj"] = pair_sum(xp, dBm)
        grads["C_proj"] = pair_sum(xp, dCm)
        dxp += dBm @ w["B_proj"].T + dCm @ w["C_proj"].T

        grads["in_proj"] = pair_sum(x, dxp)
        grads["gate_proj"] = pair_sum(x, dz)
        dx = dxp @ w["in_proj"].T + dz @ w["gate_proj"].T
        return dx, grads

    return out, pullback
