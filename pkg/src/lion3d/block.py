"""LION layers, blocks and the N-block backbone, each with a hand-written VJP.

Every ``*_vjp`` function returns ``(output, pullback)``; ``pullback`` maps
the output gradient to ``(input gradient, parameter gradients)`` where the
parameter gradients mirror the parameter container.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hierarchy, voxelgen
from .errors import ContractViolation
from .linear_rnn import BiDirParams, OperatorKind, bidir_vjp, init_bidir
from .tree import zeros_like
from .spatial import DescriptorParams, NormParams, descriptor_vjp, init_descriptor, init_norm, layer_norm_vjp, neighbor_table
from .voxelgrid import GridGeometry, VoxelSet, voxelize
from .windowing import Axis, WindowPartition, WindowShape, gather, gather_backward, partition, scatter, scatter_backward

IDENTITY = "identity"
BLOCK_STRIDE = (2, 2, 2)
HEIGHT_STRIDE = (1, 1, 2)


@dataclass
class LayerParams:
    x_norm: NormParams
    x_pass: BiDirParams
    y_norm: NormParams
    y_pass: BiDirParams


@dataclass
class BlockParams:
    layers: list  # four LayerParams, or None entries for identity passes
    descriptors: list  # two DescriptorParams


@dataclass
class BackboneParams:
    embed_w: np.ndarray
    embed_b: np.ndarray
    blocks: list


@dataclass(frozen=True)
class BlockConfig:
    window: WindowShape
    group_size: int

    def __post_init__(self):
        if self.group_size < 1:
            raise ContractViolation("block.BlockConfig", f"group size must be >= 1, got {self.group_size}")


@dataclass(frozen=True)
class BackboneConfig:
    grid: GridGeometry
    blocks: tuple
    channels: int = 64
    ratio: float = 0.2
    operator: str = "mamba"
    state_dim: int = 8
    init_dim: int = 4
    height_merge: bool = True
    seed: int = 0

    def __post_init__(self):
        where = "block.BackboneConfig"
        if not self.blocks:
            raise ContractViolation(where, "need at least one block")
        if self.channels < 1 or self.state_dim < 1:
            raise ContractViolation(where, "channels and state_dim must be positive")
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractViolation(where, f"ratio must lie in [0, 1], got {self.ratio}")
        if self.init_dim < 4:
            raise ContractViolation(where, "init_dim must be >= 4")
        if self.operator != IDENTITY:
            OperatorKind.parse(self.operator)
        if self.height_merge:
            tz = [b.window.tz for b in self.blocks]
            for a, b in zip(tz, tz[1:]):
                if b * 2 != a:
                    raise ContractViolation(where, f"window z must halve block to block with height merging, got {tz}")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def full_scale_blocks(tz0=32, sizes=(4096, 2048, 1024, 512)):
    return tuple(BlockConfig(WindowShape(13, 13, tz0 >> i), k) for i, k in enumerate(sizes))


# ---------------------------------------------------------------- parameters


def init_layer(kind, channels, state_dim, rng) -> LayerParams | None:
    if kind == IDENTITY:
        return None
    return LayerParams(
        init_norm(channels), init_bidir(kind, channels, state_dim, rng), init_norm(channels), init_bidir(kind, channels, state_dim, rng)
    )


def init_block(kind, channels, state_dim=8, rng=None) -> BlockParams:
    rng = np.random.default_rng(rng)
    layers = [init_layer(kind, channels, state_dim, rng) for _ in range(4)]
    return BlockParams(layers, [init_descriptor(channels, rng) for _ in range(2)])


def init_backbone(cfg: BackboneConfig, seed=None) -> BackboneParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    bound = np.sqrt(3.0 / cfg.init_dim)
    embed_w = rng.uniform(-bound, bound, (cfg.init_dim, cfg.channels))
    blocks = [init_block(cfg.operator, cfg.channels, cfg.state_dim, rng) for _ in cfg.blocks]
    return BackboneParams(embed_w, np.zeros(cfg.channels), blocks)


# ---------------------------------------------------------------- layer


def pass_vjp(feats, norm: NormParams, bp: BiDirParams, wp: WindowPartition):
    """One residual operator pass: feats + scatter(bidir(gather(LN(feats))))."""
    L = feats.shape[0]
    normed, pull_norm = layer_norm_vjp(feats, norm)
    mixed, pull_scan = bidir_vjp(gather(normed, wp), bp)
    out = feats + scatter(mixed, wp, L)

    def pullback(dout):
        dseq, gbp = pull_scan(scatter_backward(dout, wp))
        dfeats, gnorm = pull_norm(gather_backward(dseq, wp, L))
        return dout + dfeats, (gnorm, gbp)

    return out, pullback


def layer_vjp(vs: VoxelSet, feats, lp: LayerParams | None, window: WindowShape, group_size: int):
    if lp is None or len(vs) == 0:
        return feats, lambda d: (d, None if lp is None else zeros_like(lp))
    wx = partition(vs, window, group_size, Axis.X)
    wy = partition(vs, window, group_size, Axis.Y)
    h, pull_x = pass_vjp(feats, lp.x_norm, lp.x_pass, wx)
    out, pull_y = pass_vjp(h, lp.y_norm, lp.y_pass, wy)

    def pullback(dout):
        dh, (gyn, gyp) = pull_y(dout)
        dfeats, (gxn, gxp) = pull_x(dh)
        return dfeats, LayerParams(gxn, gxp, gyn, gyp)

    return out, pullback


def lion_layer(vs: VoxelSet, lp: LayerParams | None, window: WindowShape, group_size: int) -> VoxelSet:
    """X-axis pass then Y-axis pass, each pre-normalized and residual."""
    if lp is not None and vs.channels != lp.x_norm.scale.shape[0]:
        raise ContractViolation("block.lion_layer", f"feature dim {vs.channels} != layer dim {lp.x_norm.scale.shape[0]}")
    return vs.with_feats(layer_vjp(vs, vs.feats, lp, window, group_size)[0])


# ---------------------------------------------------------------- block


def _coarse_set(m: hierarchy.MergeMapping, feats) -> VoxelSet:
    return VoxelSet(m.coarse_coords, feats, hierarchy.coarse_shape(m.fine_shape, m.stride), m.coarse_batch)


def block_vjp(vs: VoxelSet, bp: BlockParams, bc: BlockConfig):
    """Hierarchical LION block; output coordinates equal the input's."""
    if len(vs) == 0:
        return vs.feats, lambda d: (d, zeros_like(bp))
    w, K = bc.window, bc.group_size
    h0, pull_l1 = layer_vjp(vs, vs.feats, bp.layers[0], w, K)
    d1, pull_d1 = descriptor_vjp(h0, bp.descriptors[0], neighbor_table(vs))
    m1 = hierarchy.build_mapping(vs, BLOCK_STRIDE)
    vs1 = _coarse_set(m1, hierarchy.merge_feats(d1, m1))

    h1, pull_l2 = layer_vjp(vs1, vs1.feats, bp.layers[1], w, K)
    d2, pull_d2 = descriptor_vjp(h1, bp.descriptors[1], neighbor_table(vs1))
    m2 = hierarchy.build_mapping(vs1, BLOCK_STRIDE)
    vs2 = _coarse_set(m2, hierarchy.merge_feats(d2, m2))

    h2, pull_l3 = layer_vjp(vs2, vs2.feats, bp.layers[2], w, K)
    e1 = hierarchy.expand_feats(h2, m2) + d2
    h3, pull_l4 = layer_vjp(vs1, e1, bp.layers[3], w, K)
    out = hierarchy.expand_feats(h3, m1) + d1

    def pullback(dout):
        dd1 = dout.copy()
        de1, g4 = pull_l4(hierarchy.expand_backward(dout, m1))
        dd2 = de1.copy()
        dc2, g3 = pull_l3(hierarchy.expand_backward(de1, m2))
        dd2 += hierarchy.merge_backward(dc2, m2)
        dh1, gd2 = pull_d2(dd2)
        dc1, g2 = pull_l2(dh1)
        dd1 += hierarchy.merge_backward(dc1, m1)
        dh0, gd1 = pull_d1(dd1)
        dfeats, g1 = pull_l1(dh0)
        return dfeats, BlockParams([g1, g2, g3, g4], [gd1, gd2])

    return out, pullback


def lion_block(vs: VoxelSet, bp: BlockParams, bc: BlockConfig) -> VoxelSet:
    return vs.with_feats(block_vjp(vs, bp, bc)[0])


# ---------------------------------------------------------------- backbone


@dataclass
class BackboneTrace:
    """Intermediate sets kept for inspection (per-block outputs before generation)."""

    block_outputs: list = field(default_factory=list)


def backbone_vjp(vs_in: VoxelSet, params: BackboneParams, cfg: BackboneConfig):
    """Embed, then per block: LION block -> voxel generation -> height merge."""
    if vs_in.channels != cfg.init_dim:
        raise ContractViolation("block.backbone_forward", f"input has {vs_in.channels} channels, expected {cfg.init_dim}")
    spec = voxelgen.DiffusionSpec(cfg.ratio)
    trace = BackboneTrace()
    cur = vs_in.with_feats(vs_in.feats @ params.embed_w + params.embed_b)
    steps = []
    for bc, bp in zip(cfg.blocks, params.blocks):
        feats, pull_block = block_vjp(cur, bp, bc)
        cur = cur.with_feats(feats)
        trace.block_outputs.append(cur)
        n_before = len(cur)
        if cfg.ratio > 0:
            cur = voxelgen.generate(cur, spec)
        mapping = None
        if cfg.height_merge:
            mapping = hierarchy.build_mapping(cur, HEIGHT_STRIDE)
            cur = _coarse_set(mapping, hierarchy.merge_feats(cur.feats, mapping))
        steps.append((pull_block, n_before, mapping))

    def pullback(dout):
        g = np.asarray(dout, dtype=np.float64)
        block_grads = []
        for pull_block, n_before, mapping in reversed(steps):
            if mapping is not None:
                g = hierarchy.merge_backward(g, mapping)
            g = voxelgen.diffuse_backward(g, n_before)
            g, gb = pull_block(g)
            block_grads.append(gb)
        grads = BackboneParams(vs_in.feats.T @ g, g.sum(axis=0), block_grads[::-1])
        return g @ params.embed_w.T, grads

    return cur, pullback, trace


def backbone_forward(pc, cfg: BackboneConfig, params: BackboneParams | None = None, batch=None) -> VoxelSet:
    """Voxelize a point cloud and run the full backbone."""
    params = init_backbone(cfg) if params is None else params
    vs = voxelize(pc, cfg.grid, cfg.init_dim, batch=batch)
    return backbone_vjp(vs, params, cfg)[0]
