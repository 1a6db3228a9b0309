"""3D spatial feature descriptor: sub-manifold conv -> LayerNorm -> GELU, with residual."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractViolation
from .voxelgrid import VoxelSet

# z-major iteration over the 27 neighbor offsets
OFFSETS = np.array([(dx, dy, dz) for dz, dy, dx in itertools.product((-1, 0, 1), repeat=3)], dtype=np.int64)


@dataclass
class SubmConvParams:
    kernel: np.ndarray  # (3, 3, 3, C_in, C_out), indexed by offset + 1 along x, y, z
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 5 or self.kernel.shape[:3] != (3, 3, 3):
            raise ContractViolation("spatial.SubmConvParams", f"kernel must be (3,3,3,Cin,Cout), got {self.kernel.shape}")


@dataclass
class NormParams:
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5


@dataclass
class DescriptorParams:
    conv: SubmConvParams
    norm: NormParams


def init_subm_conv(c_in, c_out, rng=None) -> SubmConvParams:
    rng = np.random.default_rng(rng)
    bound = np.sqrt(3.0 / (27 * c_in))
    return SubmConvParams(rng.uniform(-bound, bound, (3, 3, 3, c_in, c_out)), np.zeros(c_out))


def init_norm(c) -> NormParams:
    return NormParams(np.ones(c), np.zeros(c))


def init_descriptor(c, rng=None) -> DescriptorParams:
    return DescriptorParams(init_subm_conv(c, c, rng), init_norm(c))


def neighbor_table(vs: VoxelSet) -> np.ndarray:
    """(27, L) neighbor indices in OFFSETS order, -1 where the neighbor is empty."""
    L = len(vs)
    table = np.full((len(OFFSETS), L), -1, np.int64)
    for o, off in enumerate(OFFSETS):
        table[o] = vs.find(vs.coords + off, vs.batch)
    return table


def _conv_core(feats, kernel, bias, table):
    out = np.broadcast_to(bias, (feats.shape[0], kernel.shape[-1])).copy()
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        nbr = table[o]
        dst = np.flatnonzero(nbr >= 0)
        if len(dst):
            out[dst] += feats[nbr[dst]] @ kernel[dx + 1, dy + 1, dz + 1]
    return out


def subm_conv(vs: VoxelSet, p: SubmConvParams, table=None) -> VoxelSet:
    """Sparse 3x3x3 convolution evaluated only at the active sites of ``vs``."""
    if vs.channels != p.kernel.shape[3]:
        raise ContractViolation("spatial.subm_conv", f"input has {vs.channels} channels, kernel expects {p.kernel.shape[3]}")
    table = neighbor_table(vs) if table is None else table
    return vs.with_feats(_conv_core(vs.feats, p.kernel, p.bias, table))


def subm_conv_vjp(feats, p: SubmConvParams, table):
    out = _conv_core(feats, p.kernel, p.bias, table)

    def pullback(dout):
        dfeats = np.zeros_like(feats)
        dkernel = np.zeros_like(p.kernel)
        for o, (dx, dy, dz) in enumerate(OFFSETS):
            nbr = table[o]
            dst = np.flatnonzero(nbr >= 0)
            if not len(dst):
                continue
            src = nbr[dst]
            k = p.kernel[dx + 1, dy + 1, dz + 1]
            dkernel[dx + 1, dy + 1, dz + 1] = feats[src].T @ dout[dst]
            np.add.at(dfeats, src, dout[dst] @ k.T)
        return dfeats, SubmConvParams(dkernel, dout.sum(axis=0))

    return out, pullback


def layer_norm(x, p: NormParams):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + p.eps) * p.scale + p.shift


def layer_norm_vjp(x, p: NormParams):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu) * rstd
    out = xhat * p.scale + p.shift

    def pullback(dout):
        dxhat = dout * p.scale
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(dout.ndim - 1))
        return dx, NormParams((dout * xhat).sum(axis=axes), dout.sum(axis=axes), p.eps)

    return out, pullback


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def descriptor_vjp(feats, p: DescriptorParams, table):
    conv_out, pull_conv = subm_conv_vjp(feats, p.conv, table)
    normed, pull_norm = layer_norm_vjp(conv_out, p.norm)
    out = feats + gelu(normed)

    def pullback(dout):
        dnormed = dout * gelu_grad(normed)
        dconv, gnorm = pull_norm(dnormed)
        dfeats, gconv = pull_conv(dconv)
        return dout + dfeats, DescriptorParams(gconv, gnorm)

    return out, pullback


def descriptor(vs: VoxelSet, conv: SubmConvParams, norm: NormParams, table=None) -> VoxelSet:
    """out = in + GELU(LayerNorm(subm_conv(in))), per voxel."""
    conv_vs = subm_conv(vs, conv, table)
    return vs.with_feats(vs.feats + gelu(layer_norm(conv_vs.feats, norm)))


def descriptor_backward(vs: VoxelSet, p: DescriptorParams, grad_out, table=None):
    """VJP of ``descriptor``: returns (grad_feats, grad DescriptorParams)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != vs.feats.shape[:1] + (p.conv.kernel.shape[-1],):
        raise ContractViolation("spatial.descriptor_backward", f"grad shape {grad_out.shape} does not match output")
    table = neighbor_table(vs) if table is None else table
    _, pull = descriptor_vjp(vs.feats, p, table)
    return pull(grad_out)
