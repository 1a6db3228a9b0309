from __future__ import annotations

import numpy as np

from ..errors import ContractViolation, check_finite
from . import retention, selective_scan, wkv
from .params import BiDirParams, LinearRnnParams, OperatorKind

_IMPL = {
    OperatorKind.SELECTIVE_SCAN: selective_scan,
    OperatorKind.RETENTION: retention,
    OperatorKind.WKV: wkv,
}


def _as_groups(seq, p: LinearRnnParams, where):
    seq = np.asarray(seq, dtype=np.float64)
    check_finite(where, seq)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[-1] != p.dim:
        raise ContractViolation(where, f"expected (T, {p.dim}) or (G, T, {p.dim}) input, got {seq.shape}")
    if seq.shape[1] < 1:
        raise ContractViolation(where, "sequence length must be >= 1")
    return seq, squeeze


def scan_forward(seq, p: LinearRnnParams, chunk_size: int | None = None) -> np.ndarray:
    """Causal linear recurrence over each group of ``seq``.

    ``seq`` is (T, C) or (groups, T, C). With ``chunk_size`` the chunkwise
    form is used: each chunk is evaluated in closed form from the state
    carried in from the previous chunk.
    """
    x, squeeze = _as_groups(seq, p, "linear_rnn.scan_forward")
    out = _IMPL[p.kind].forward(x, p.weights, chunk_size)
    return out[0] if squeeze else out


def scan_vjp(seq, p: LinearRnnParams):
    """Forward pass plus a pullback mapping grad_out -> (grad_seq, grad_params)."""
    x, squeeze = _as_groups(seq, p, "linear_rnn.scan_forward")
    out, pull = _IMPL[p.kind].vjp(x, p.weights)

    def pullback(grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None] if squeeze else g
        if g.shape != out.shape:
            raise ContractViolation("linear_rnn.scan_backward_vjp", f"grad shape {g.shape} != output shape {out.shape}")
        dx, grads = pull(g)
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in p.weights.items()}
        return (dx[0] if squeeze else dx), LinearRnnParams(p.kind, full)

    return (out[0] if squeeze else out), pullback


def scan_backward_vjp(seq, p: LinearRnnParams, grad_out):
    return scan_vjp(seq, p)[1](grad_out)


def hidden_states(seq, p: LinearRnnParams) -> np.ndarray:
    x, squeeze = _as_groups(seq, p, "linear_rnn.hidden_states")
    h = _IMPL[p.kind].hidden_states(x, p.weights)
    return h[0] if squeeze else h


def bidir_apply(seq, bp: BiDirParams, chunk_size: int | None = None) -> np.ndarray:
    """Average of a forward scan and a time-reversed scan with separate weights."""
    seq = np.asarray(seq, dtype=np.float64)
    fwd = scan_forward(seq, bp.fwd, chunk_size)
    bwd = scan_forward(seq[..., ::-1, :], bp.bwd, chunk_size)[..., ::-1, :]
    return 0.5 * (fwd + bwd)


def bidir_vjp(seq, bp: BiDirParams):
    seq = np.asarray(seq, dtype=np.float64)
    fwd, pull_f = scan_vjp(seq, bp.fwd)
    bwd, pull_b = scan_vjp(seq[..., ::-1, :], bp.bwd)
    out = 0.5 * (fwd + bwd[..., ::-1, :])

    def pullback(grad_out):
        g = 0.5 * np.asarray(grad_out, dtype=np.float64)
        dx_f, gp_f = pull_f(g)
        dx_b, gp_b = pull_b(g[..., ::-1, :])
        return dx_f + dx_b[..., ::-1, :], BiDirParams(gp_f, gp_b)

    return out, pullback
