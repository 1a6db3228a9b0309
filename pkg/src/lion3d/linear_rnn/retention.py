"""Single-head retention (RetNet-style) with a fixed scalar decay gamma.

    q_t = x_t W_q,  k_t = x_t W_k / sqrt(S),  v_t = x_t W_v
    S_t = gamma * S_{t-1} + k_t^T v_t      (S, C) state
    out_t = (q_t S_t) W_out
"""
import numpy as np

from ._math import pair_sum


def _project(x, w):
    S = w["q_proj"].shape[1]
    return x @ w["q_proj"], (x @ w["k_proj"]) / np.sqrt(S), x @ w["v_proj"]


def _sequential(q, k, v, gamma):
    G, T, S = k.shape
    states = np.empty((G, T, S, v.shape[-1]))
    if T == 0:
        return states
    states[:, 0] = k[:, 0, :, None] * v[:, 0, None, :]
    for t in range(1, T):
        np.multiply(gamma, states[:, t - 1], out=states[:, t])
        states[:, t] += k[:, t, :, None] * v[:, t, None, :]
    return states


def _chunked(q, k, v, gamma, chunk):
    G, T, S = k.shape
    y = np.empty(q.shape[:2] + (v.shape[-1],))
    state = np.zeros((G, S, v.shape[-1]))
    for t0 in range(0, T, chunk):
        t1 = min(t0 + chunk, T)
        n = t1 - t0
        j = np.arange(n)
        expo = j[:, None] - j[None, :]
        decay = np.where(expo >= 0, gamma ** np.maximum(expo, 0), 0.0)
        qc, kc, vc = q[:, t0:t1], k[:, t0:t1], v[:, t0:t1]
        scores = np.einsum("gts,gus->gtu", qc, kc) * decay
        y[:, t0:t1] = scores @ vc + (gamma ** (j + 1))[None, :, None] * np.einsum("gts,gsc->gtc", qc, state)
        state = gamma ** n * state + np.einsum("gus,guc->gsc", kc * (gamma ** (n - 1 - j))[None, :, None], vc)
    return y


def forward(x, w, chunk_size=None):
    q, k, v = _project(x, w)
    gamma = float(w["gamma"])
    if chunk_size:
        y = _chunked(q, k, v, gamma, chunk_size)
    else:
        y = np.einsum("gts,gtsc->gtc", q, _sequential(q, k, v, gamma))
    return y @ w["out_proj"]


def hidden_states(x, w):
    q, k, v = _project(x, w)
    return _sequential(q, k, v, float(w["gamma"]))


def vjp(x, w):
    q, k, v = _project(x, w)
    gamma = float(w["gamma"])
    states = _sequential(q, k, v, gamma)
    y = np.einsum("gts,gtsc->gtc", q, states)
    out = y @ w["out_proj"]

    def pullback(dout):
        G, T, C = x.shape
        S = k.shape[-1]
        grads = {"out_proj": pair_sum(y, dout)}
        dy = dout @ w["out_proj"].T
        dq = np.einsum("gtc,gtsc->gts", dy, states)
        src = q[..., None] * dy[:, :, None, :]
        dS = np.empty_like(states)
        dS[:, T - 1] = src[:, T - 1]
        for t in range(T - 2, -1, -1):
            np.multiply(gamma, dS[:, t + 1], out=dS[:, t])
            dS[:, t] += src[:, t]
        grads["gamma"] = np.array(np.einsum("gtsc,gtsc->", dS[:, 1:], states[:, :-1]))
        dk = np.einsum("gtsc,gtc->gts", dS, v) / np.sqrt(S)
        dv = np.einsum("gtsc,gts->gtc", dS, k)
        grads["q_proj"] = pair_sum(x, dq)
        grads["k_proj"] = pair_sum(x, dk)
        grads["v_proj"] = pair_sum(x, dv)
        dx = dq @ w["q_proj"].T + dk @ w["k_proj"].T + dv @ w["v_proj"].T
        return dx, grads

    return out, pullback
