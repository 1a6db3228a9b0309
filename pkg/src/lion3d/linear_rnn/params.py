from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation


class OperatorKind(enum.Enum):
    SELECTIVE_SCAN = "mamba"
    RETENTION = "retnet"
    WKV = "rwkv"

    @classmethod
    def parse(cls, name) -> "OperatorKind":
        if isinstance(name, cls):
            return name
        for kind in cls:
            if name in (kind.value, kind.name, kind.name.lower()):
                return kind
        raise ContractViolation("linear_rnn.OperatorKind", f"unknown operator {name!r}; expected mamba|retnet|rwkv")


# parameter names that are fixed hyperparameters rather than trained weights
FROZEN = frozenset({"gamma"})


@dataclass
class LinearRnnParams:
    kind: OperatorKind
    weights: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.weights["out_proj"].shape[1]

    @property
    def state_dim(self) -> int:
        w = self.weights
        if self.kind is OperatorKind.SELECTIVE_SCAN:
            return w["A_log"].shape[1]
        if self.kind is OperatorKind.RETENTION:
            return w["q_proj"].shape[1]
        return 1

    def zeros_like(self) -> "LinearRnnParams":
        return LinearRnnParams(self.kind, {k: np.zeros_like(v) for k, v in self.weights.items()})

    def copy(self) -> "LinearRnnParams":
        return LinearRnnParams(self.kind, {k: v.copy() for k, v in self.weights.items()})


@dataclass
class BiDirParams:
    fwd: LinearRnnParams
    bwd: LinearRnnParams

    def __post_init__(self):
        if self.fwd.kind is not self.bwd.kind or self.fwd.dim != self.bwd.dim:
            raise ContractViolation("linear_rnn.BiDirParams", "forward and backward branches must match in kind and dim")


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(kind, dim: int, state_dim: int = 8, rng=None) -> LinearRnnParams:
    """Draw fresh operator weights.

    Projections are uniform with unit output variance per unit input
    variance. Decays start so that the longest memories reach a few hundred
    steps.
    """
    kind = OperatorKind.parse(kind)
    rng = np.random.default_rng(rng)
    C, S = dim, state_dim
    if kind is OperatorKind.SELECTIVE_SCAN:
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=C))
        w = {
            "in_proj": _uniform(rng, C, (C, C)),
            "gate_proj": _uniform(rng, C, (C, C)),
            "dt_proj": _uniform(rng, C, (C, C)) * 0.1,
            # inverse softplus so that softplus(dt_bias) == dt
            "dt_bias": dt + np.log(-np.expm1(-dt)),
            "B_proj": _uniform(rng, C, (C, S)),
            "C_proj": _uniform(rng, C, (C, S)),
            "A_log": np.log(np.tile(np.geomspace(1.0, 8.0, S), (C, 1))),
            "D": np.ones(C),
            "out_proj": _uniform(rng, C, (C, C)),
        }
    elif kind is OperatorKind.RETENTION:
        w = {
            "q_proj": _uniform(rng, C, (C, S)),
            "k_proj": _uniform(rng, C, (C, S)),
            "v_proj": _uniform(rng, C, (C, C)),
            "gamma": np.array(1.0 - 2.0 ** -5),
            "out_proj": _uniform(rng, C, (C, C)),
        }
    else:
        ramp = np.arange(C) / max(C - 1, 1)
        w = {
            "k_proj": _uniform(rng, C, (C, C)),
            "v_proj": _uniform(rng, C, (C, C)),
            "r_proj": _uniform(rng, C, (C, C)),
            "time_decay": -5.0 + 8.0 * ramp ** 0.7,
            "time_first": np.log(0.3) + 0.5 * (((np.arange(C) + 1) % 3) - 1),
            "out_proj": _uniform(rng, C, (C, C)),
        }
    return LinearRnnParams(kind, w)


def init_bidir(kind, dim: int, state_dim: int = 8, rng=None) -> BiDirParams:
    rng = np.random.default_rng(rng)
    return BiDirParams(init_params(kind, dim, state_dim, rng), init_params(kind, dim, state_dim, rng))
