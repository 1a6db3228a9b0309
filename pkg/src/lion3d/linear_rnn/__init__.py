"""Linear group RNN operators: selective scan, retention and WKV."""
from .ops import bidir_apply, bidir_vjp, hidden_states, scan_backward_vjp, scan_forward, scan_vjp
from .params import FROZEN, BiDirParams, LinearRnnParams, OperatorKind, init_bidir, init_params

__all__ = [
    "FROZEN",
    "BiDirParams",
    "LinearRnnParams",
    "OperatorKind",
    "bidir_apply",
    "bidir_vjp",
    "hidden_states",
    "init_bidir",
    "init_params",
    "scan_backward_vjp",
    "scan_forward",
    "scan_vjp",
]
