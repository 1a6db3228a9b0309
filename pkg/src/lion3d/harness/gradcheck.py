"""Hand-written VJPs against central finite differences.

The error of a parameter block is normwise over the sampled entries:
max |analytic - numeric| / max |numeric|, so tiny individual entries do
not turn finite-difference roundoff into a spurious failure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import hierarchy
from ..block import BackboneConfig, BlockConfig, backbone_vjp, block_vjp, init_backbone, init_block, init_layer, layer_vjp
from ..linear_rnn import OperatorKind, bidir_vjp, init_bidir, init_params, scan_vjp
from ..spatial import descriptor_vjp, init_descriptor, init_subm_conv, layer_norm_vjp, neighbor_table, subm_conv_vjp, NormParams
from ..tree import iter_arrays
from ..voxelgrid import GridGeometry, VoxelSet
from ..windowing import WindowShape
from . import head as H

FD_STEP = 1e-5
KINDS = tuple(k.value for k in OperatorKind)


@dataclass
class GradReport:
    rows: list = field(default_factory=list)  # (module, block, error)

    def add(self, module, errors: dict):
        self.rows.extend((module, k, v) for k, v in errors.items())

    def worst(self, prefix="") -> float:
        errs = [e for m, _, e in self.rows if m.startswith(prefix)]
        return max(errs) if errs else 0.0

    def format(self) -> str:
        lines = [f"{m:<24} {b:<40} {e:.3e}" for m, b, e in self.rows]
        return "\n".join(lines) + "\n"


def check_vjp(fn, x, params, rng, n_samples=6, eps=FD_STEP) -> dict:
    """Compare ``fn(x, params) -> (out, pullback)`` against central differences.

    The scalar probed is <w, out> for a fixed random cotangent w. Returns the
    normwise relative error for the input and every parameter block.
    """
    out, pull = fn(x, params)
    w = rng.standard_normal(np.shape(out))
    dx, grads = pull(w)
    analytic = {"input": dx, **{f"param.{k}": v for k, v in iter_arrays(grads)}}
    targets = {"input": x, **{f"param.{k}": v for k, v in iter_arrays(params)}}

    def scalar():
        return float(np.sum(w * fn(x, params)[0]))

    errors = {}
    for name, arr in targets.items():
        if arr.size == 0:
            continue
        picks = rng.choice(arr.size, size=min(n_samples, arr.size), replace=False)
        num, ana = [], []
        flat = arr.reshape(-1)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            fp = scalar()
            flat[i] = old - eps
            fm = scalar()
            flat[i] = old
            num.append((fp - fm) / (2 * eps))
            ana.append(np.asarray(analytic[name]).reshape(-1)[i])
        num, ana = np.asarray(num), np.asarray(ana)
        scale = np.abs(num).max()
        errors[name] = float(np.abs(ana - num).max() / scale) if scale > 0 else float(np.abs(ana).max())
    return errors


def random_voxel_set(rng, shape=(8, 8, 8), n=40, channels=8) -> VoxelSet:
    keys = rng.choice(int(np.prod(shape)), size=n, replace=False)
    coords = np.column_stack(np.unravel_index(keys, shape)).astype(np.int64)
    return VoxelSet(coords, rng.standard_normal((n, channels)), tuple(shape))


def _on_set(vs, f):
    """Adapt a feature-level VJP on a fixed voxel set to fn(x, params)."""
    return lambda x, p: f(vs.with_feats(x), p)


def module_report(kind: str, seed=0, channels=8, n_voxels=40, report=None) -> GradReport:
    rng = np.random.default_rng(seed)
    report = GradReport() if report is None else report
    C = channels

    p = init_params(kind, C, 4, rng)
    seq = rng.standard_normal((2, 12, C))
    report.add(f"scan.{kind}", check_vjp(scan_vjp, seq, p, rng))
    report.add(f"bidir.{kind}", check_vjp(bidir_vjp, seq.copy(), init_bidir(kind, C, 4, rng), rng))

    vs = random_voxel_set(rng, n=n_voxels, channels=C)
    window, K = WindowShape(4, 4, 4), 8
    lp = init_layer(kind, C, 4, rng)
    report.add(f"layer.{kind}", check_vjp(lambda x, q: layer_vjp(vs, x, q, window, K), vs.feats.copy(), lp, rng))
    bp = init_block(kind, C, 4, rng)
    report.add(f"block.{kind}", check_vjp(_on_set(vs, lambda v, q: block_vjp(v, q, BlockConfig(window, K))), vs.feats.copy(), bp, rng))
    return report


def spatial_report(seed=0, channels=8, n_voxels=40, report=None) -> GradReport:
    rng = np.random.default_rng(seed)
    report = GradReport() if report is None else report
    vs = random_voxel_set(rng, n=n_voxels, channels=channels)
    table = neighbor_table(vs)
    x = vs.feats.copy()
    report.add("subm_conv", check_vjp(lambda a, q: subm_conv_vjp(a, q, table), x.copy(), init_subm_conv(channels, channels, rng), rng))
    norm = NormParams(1.0 + 0.1 * rng.standard_normal(channels), 0.1 * rng.standard_normal(channels))
    report.add("layer_norm", check_vjp(layer_norm_vjp, x.copy(), norm, rng))
    report.add("descriptor", check_vjp(lambda a, q: descriptor_vjp(a, q, table), x.copy(), init_descriptor(channels, rng), rng))

    for stride in ((2, 2, 2), (1, 1, 2)):
        m = hierarchy.build_mapping(vs, stride)
        tag = "".join(map(str, stride))

        def merge_fn(a, _):
            return hierarchy.merge_feats(a, m), lambda g: (hierarchy.merge_backward(g, m), {})

        def expand_fn(a, _):
            return hierarchy.expand_feats(a, m), lambda g: (hierarchy.expand_backward(g, m), {})

        report.add(f"merge.{tag}", check_vjp(merge_fn, x.copy(), {}, rng))
        report.add(f"expand.{tag}", check_vjp(expand_fn, rng.standard_normal((m.n_coarse, channels)), {}, rng))
    return report


def tiny_backbone(kind: str, channels=8, ratio=0.2, seed=0) -> BackboneConfig:
    grid = GridGeometry((0.0, 0.0, 0.0), (8.0, 8.0, 8.0), (1.0, 1.0, 1.0))
    return BackboneConfig(grid, (BlockConfig(WindowShape(4, 4, 4), 8),), channels=channels, ratio=ratio, operator=kind, state_dim=4, seed=seed)


def end_to_end_report(kind: str, seed=0, channels=8, n_voxels=40, report=None) -> GradReport:
    """One-block backbone (with generation and height merge), then BEV, head and loss."""
    rng = np.random.default_rng(seed)
    report = GradReport() if report is None else report
    cfg = tiny_backbone(kind, channels, seed=seed)
    vs = random_voxel_set(rng, cfg.grid.shape, n_voxels, cfg.init_dim)
    params = init_backbone(cfg, rng.integers(2**63))

    def bb(x, q):
        out, pull, _ = backbone_vjp(vs.with_feats(x), q, cfg)
        return out.feats, pull

    report.add(f"backbone.{kind}", check_vjp(bb, vs.feats.copy(), params, rng))

    hp = H.init_head(channels, 6, 1, rng)
    # empty BEV cells see pre-activation == conv_b, keep that off the ReLU kink
    hp.conv_b += rng.uniform(0.05, 0.2, hp.conv_b.shape) * rng.choice([-1.0, 1.0], hp.conv_b.shape)
    heat = rng.uniform(0.0, 1.0, (1, 8, 8, 1))
    centers = np.array([[0, 2, 3], [0, 5, 5]])
    targets = H.Targets(heat, centers, np.zeros(2, np.int64), rng.standard_normal((2, H.N_REG)))

    def full(x, q):
        bparams, hparams = q
        final, pull_bb, _ = backbone_vjp(vs.with_feats(x), bparams, cfg)
        bev, pull_bev = H.bev_vjp(final, 1)
        out, pull_head = H.head_vjp(bev, hparams)
        loss, dout, _ = H.detection_loss(out, targets)

        def pull(g):
            dbev, gh = pull_head(dout * g)
            dx, gb = pull_bb(pull_bev(dbev))
            return dx, [gb, gh]

        return np.asarray(loss), pull

    report.add(f"detector.{kind}", check_vjp(full, vs.feats.copy(), [params, hp], rng))
    return report


def grad_check(kinds=KINDS, seed=0) -> GradReport:
    report = spatial_report(seed)
    for kind in kinds:
        module_report(kind, seed, report=report)
        end_to_end_report(kind, seed, report=report)
    return report
