"""WKV recurrence (RWKV-style), per channel:

    wkv_t = (a_{t-1} + e^{u + k_t} v_t) / (b_{t-1} + e^{u + k_t})
    a_t = e^w a_{t-1} + e^{k_t} v_t,   b_t = e^w b_{t-1} + e^{k_t}
    out_t = (sigmoid(r_t) * wkv_t) W_out

with w = -exp(time_decay) < 0 and u = time_first. The states a, b are kept
as (a_hat, b_hat, p) with a = a_hat * e^p, p the running maximum exponent,
so nothing overflows however long the sequence is.
"""
import numpy as np

from ._math import pair_sum, sigmoid


def _project(x, w):
    return x @ w["k_proj"], x @ w["v_proj"], x @ w["r_proj"]


def _sequential(k, v, decay_w, u):
    G, T, C = k.shape
    p_st = np.empty((G, T + 1, C))
    a_st = np.empty((G, T + 1, C))
    b_st = np.empty((G, T + 1, C))
    q_out = np.empty((G, T, C))
    den_out = np.empty((G, T, C))
    wkv = np.empty((G, T, C))
    p_st[:, 0] = -np.inf
    a_st[:, 0] = 0.0
    b_st[:, 0] = 0.0
    for t in range(T):
        p, a, b = p_st[:, t], a_st[:, t], b_st[:, t]
        kt, vt = k[:, t], v[:, t]
        ww = u + kt
        qo = np.maximum(p, ww)
        e1 = np.exp(p - qo)
        e2 = np.exp(ww - qo)
        den = e1 * b + e2
        wkv[:, t] = (e1 * a + e2 * vt) / den
        q_out[:, t] = qo
        den_out[:, t] = den
        ww = decay_w + p
        qn = np.maximum(ww, kt)
        f1 = np.exp(ww - qn)
        f2 = np.exp(kt - qn)
        a_st[:, t + 1] = f1 * a + f2 * vt
        b_st[:, t + 1] = f1 * b + f2
        p_st[:, t + 1] = qn
    return wkv, (p_st, a_st, b_st, q_out, den_out)


def _chunked(k, v, decay_w, u, chunk):
    G, T, C = k.shape
    wkv = np.empty((G, T, C))
    p = np.full((G, C), -np.inf)
    a = np.zeros((G, C))
    b = np.zeros((G, C))
    for t0 in range(0, T, chunk):
        t1 = min(t0 + chunk, T)
        n = t1 - t0
        j = np.arange(n)
        kc, vc = k[:, t0:t1], v[:, t0:t1]
        lag = (j[:, None] - 1 - j[None, :]).astype(np.float64)
        intra = np.where((lag >= 0)[None, :, :, None], lag[None, :, :, None] * decay_w + kc[:, None, :, :], -np.inf)
        from_state = j[None, :, None] * decay_w + p[:, None, :]
        bonus = u + kc
        m = np.maximum(np.maximum(intra.max(axis=2), from_state), bonus)
        e_in = np.exp(intra - m[:, :, None, :])
        e_st = np.exp(from_state - m)
        e_bo = np.exp(bonus - m)
        num = np.einsum("gjic,gic->gjc", e_in, vc) + e_st * a[:, None] + e_bo * vc
        den = e_in.sum(axis=2) + e_st * b[:, None] + e_bo
        wkv[:, t0:t1] = num / den

        tail = (n - 1 - j)[None, :, None] * decay_w + kc
        carried = n * decay_w + p
        m2 = np.maximum(tail.max(axis=1), carried)
        f_in = np.exp(tail - m2[:, None])
        f_st = np.exp(carried - m2)
        a = (f_in * vc).sum(axis=1) + f_st * a
        b = f_in.sum(axis=1) + f_st * b
        p = m2
    return wkv


def forward(x, w, chunk_size=None):
    k, v, r = _project(x, w)
    decay_w = -np.exp(w["time_decay"])
    if chunk_size:
        wkv = _chunked(k, v, decay_w, w["time_first"], chunk_size)
    else:
        wkv, _ = _sequential(k, v, decay_w, w["time_first"])
    return (sigmoid(r) * wkv) @ w["out_proj"]


def hidden_states(x, w):
    """True (unscaled) numerator/denominator states, stacked on the last axis."""
    k, v, _ = _project(x, w)
    _, (p_st, a_st, b_st, _, _) = _sequential(k, v, -np.exp(w["time_decay"]), w["time_first"])
    scale = np.exp(p_st[:, 1:])
    return np.stack([a_st[:, 1:] * scale, b_st[:, 1:] * scale], axis=-1)


def vjp(x, w):
    k, v, r = _project(x, w)
    decay_w = -np.exp(w["time_decay"])
    u = w["time_first"]
    wkv, (p_st, a_st, b_st, q_out, den_out) = _sequential(k, v, decay_w, u)
    sr = sigmoid(r)
    gated = sr * wkv
    out = gated @ w["out_proj"]

    def pullback(dout):
        G, T, C = x.shape
        grads = {"out_proj": pair_sum(gated, dout)}
        dgated = dout @ w["out_proj"].T
        gwkv = dgated * sr
        dr = dgated * wkv * sr * (1.0 - sr)

        # output-side terms, all exponents relative to the per-step maximum
        inv = gwkv / den_out
        e_bonus = np.exp(u + k - q_out)
        dk = inv * (v - wkv) * e_bonus
        du = dk.sum(axis=(0, 1))
        dv = inv * e_bonus
        to_state = np.exp(p_st[:, :T] - q_out) * inv
        ga_out = to_state
        gb_out = -to_state * wkv

        ga = np.zeros((G, C))
        gb = np.zeros((G, C))
        dw = np.zeros(C)
        for t in range(T - 1, -1, -1):
            fk = np.exp(k[:, t] - p_st[:, t + 1])
            dk[:, t] += (ga * v[:, t] + gb) * fk
            dv[:, t] += ga * fk
            fw = np.exp(decay_w + p_st[:, t] - p_st[:, t + 1])
            dw += (fw * (ga * a_st[:, t] + gb * b_st[:, t])).sum(axis=0)
            ga = fw * ga + ga_out[:, t]
            gb = fw * gb + gb_out[:, t]

        grads["time_decay"] = dw * decay_w
        grads["time_first"] = du
        grads["k_proj"] = pair_sum(x, dk)
        grads["v_proj"] = pair_sum(x, dv)
        grads["r_proj"] = pair_sum(x, dr)
        dx = dk @ w["k_proj"].T + dv @ w["v_proj"].T + dr @ w["r_proj"].T
        return dx, grads

    return out, pullback
