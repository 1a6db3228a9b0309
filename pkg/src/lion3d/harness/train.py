"""End-to-end training of backbone + head on synthetic scenes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..block import BackboneConfig, BackboneParams, BlockConfig, backbone_vjp, init_backbone
from ..voxelgrid import GridGeometry, concat_voxel_sets, voxelize
from ..windowing import WindowShape
from . import head as H
from .optim import Adam
from .scene import make_scenes

log = logging.getLogger(__name__)


@dataclass
class DetectorParams:
    backbone: BackboneParams
    head: H.HeadParams


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig
    n_scenes: int = 64
    n_objects: int = 3
    batch_size: int = 8
    steps: int = 500
    lr: float = 3e-3
    hidden: int = 16
    reg_weight: float = 0.25
    seed: int = 0


def toy_backbone(operator="mamba", channels=16, group_size=256, n_blocks=2, ratio=0.2, seed=0) -> BackboneConfig:
    grid = GridGeometry((0.0, 0.0, -0.4), (12.8, 12.8, 2.8), (0.4, 0.4, 0.2))
    blocks = tuple(BlockConfig(WindowShape(13, 13, 16 >> i), group_size) for i in range(n_blocks))
    return BackboneConfig(grid, blocks, channels=channels, ratio=ratio, operator=operator, state_dim=8, seed=seed)


def toy_config(operator="mamba", **kwargs) -> TrainConfig:
    bb_keys = {"channels", "group_size", "n_blocks", "ratio"}
    bb = toy_backbone(operator, **{k: kwargs.pop(k) for k in list(kwargs) if k in bb_keys})
    return TrainConfig(bb, **kwargs)


def init_detector(cfg: TrainConfig, seed=None) -> DetectorParams:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    bb = init_backbone(cfg.backbone, rng.integers(2**63))
    return DetectorParams(bb, H.init_head(cfg.backbone.channels, cfg.hidden, 1, rng.integers(2**63)))


class Batcher:
    """Voxelized scenes plus their targets, served as multi-scene VoxelSets."""

    def __init__(self, scenes, bcfg: BackboneConfig):
        self.scenes = scenes
        self.cfg = bcfg
        self.voxels = [voxelize(s.points, bcfg.grid, bcfg.init_dim) for s in scenes]
        self.bev_shape = bcfg.grid.shape[:2]

    def batch(self, idx):
        idx = sorted(int(i) for i in idx)
        vs = concat_voxel_sets([self.voxels[i] for i in idx])
        targets = H.build_targets([self.scenes[i] for i in idx], self.cfg.grid, self.bev_shape)
        return vs, targets, len(idx)


def forward_loss(params: DetectorParams, bcfg: BackboneConfig, vs, targets, n_batches, reg_weight=0.25, need_grad=True):
    """Loss, gradients (or None) and decoded peaks for one multi-scene batch."""
    final, pull_bb, _ = backbone_vjp(vs, params.backbone, bcfg)
    bev, pull_bev = H.bev_vjp(final, n_batches)
    out, pull_head = H.head_vjp(bev, params.head)
    loss, dout, parts = H.detection_loss(out, targets, reg_weight)
    dets = H.decode_peaks(out)
    if not need_grad:
        return loss, None, dets
    dbev, g_head = pull_head(dout)
    _, g_bb = pull_bb(pull_bev(dbev))
    return loss, DetectorParams(g_bb, g_head), dets


def _hits(dets, targets):
    return H.center_recall(dets, targets) * len(targets.centers), len(targets.centers)


def evaluate(params, cfg: TrainConfig, batcher: Batcher) -> dict:
    losses, hits, total = [], 0.0, 0
    n = len(batcher.scenes)
    for start in range(0, n, cfg.batch_size):
        vs, targets, nb = batcher.batch(range(start, min(start + cfg.batch_size, n)))
        loss, _, dets = forward_loss(params, cfg.backbone, vs, targets, nb, cfg.reg_weight, need_grad=False)
        losses.append(loss)
        h, t = _hits(dets, targets)
        hits += h
        total += t
    return {"loss": float(np.mean(losses)), "recall": hits / total if total else 1.0}


@dataclass
class TrainResult:
    trace: list
    params: DetectorParams
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)


def train(cfg: TrainConfig, steps=None, seed=None, evaluate_ends=True, callback=None, scenes=None) -> TrainResult:
    """Adam on minibatches of scenes; every per-step record is (step, loss, recall) before the update.

    Deterministic for a fixed (config, seed). ``scenes`` replaces the
    generated synthetic set.
    """
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    steps = cfg.steps if steps is None else steps
    if scenes is None:
        scenes = make_scenes(cfg.seed, cfg.n_scenes, cfg.n_objects, cfg.backbone.grid)
    else:
        cfg = replace(cfg, n_scenes=len(scenes), batch_size=min(cfg.batch_size, len(scenes)))
    batcher = Batcher(scenes, cfg.backbone)
    params = init_detector(cfg)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])

    initial = evaluate(params, cfg, batcher) if evaluate_ends else {}
    trace = []
    order = np.zeros(0, np.int64)
    for step in range(steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(cfg.n_scenes)])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        vs, targets, nb = batcher.batch(idx)
        loss, grads, dets = forward_loss(params, cfg.backbone, vs, targets, nb, cfg.reg_weight)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        record = {"step": step, "loss": float(loss), "recall": H.center_recall(dets, targets)}
        trace.append(record)
        if callback:
            callback(record)
        log.debug("step %d loss %.6f recall %.3f", step, record["loss"], record["recall"])
        opt.step(grads)
    final = evaluate(params, cfg, batcher) if evaluate_ends else {}
    return TrainResult(trace, params, initial, final)


def format_trace(trace) -> str:
    return "".join(f"{r['step']} {r['loss']:.17g} {r['recall']:.17g}\n" for r in trace)
