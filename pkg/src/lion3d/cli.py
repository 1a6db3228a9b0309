"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 contract violation or bad input data.
"""
from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .block import backbone_vjp, init_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import ContractViolation, check_finite
from .voxelgrid import read_point_cloud, read_voxel_dump, voxelize, write_point_cloud, write_voxel_dump
from .windowing import Axis, partition_table

log = logging.getLogger("lion3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _existing(args, flag):
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise UsageError(f"{flag} is required")
    if not Path(value).is_file():
        raise UsageError(f"{flag}: no such file: {value}")
    return Path(value)


def _seed(args, cfg: RunConfig):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LION_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"LION_SEED must be an integer, got {env!r}")
    return cfg.seed


def _run_config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file() and args.config not in ("default", "toy"):
        raise UsageError(f"--config: no such file: {args.config}")
    cfg = load_config(args.config)
    return cfg.with_overrides(operator=getattr(args, "operator", None), seed=_seed(args, cfg))


def _read_points(path):
    # the library drops non-finite points; at the command line they are an input error
    pts = read_point_cloud(path)
    check_finite("voxelgrid.read_point_cloud", pts)
    return pts


def _load_input(path: Path, cfg: RunConfig):
    """Voxelize a point cloud, or read a voxel dump directly."""
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == b"LIONVX1\0":
        vs = read_voxel_dump(path, cfg.backbone.grid.shape)
        check_finite("voxelgrid.read_voxel_dump", vs.feats)
        return vs
    pts = _read_points(path)
    return voxelize(pts, cfg.backbone.grid, cfg.backbone.init_dim)


def _params(args, cfg: RunConfig):
    params = init_backbone(cfg.backbone)
    if getattr(args, "checkpoint", None):
        load_checkpoint(_existing(args, "--checkpoint"), params)
    return params


# ---------------------------------------------------------------- commands


def cmd_voxelize(args):
    cfg = _run_config(args)
    pts = _read_points(_existing(args, "--input"))
    vs = voxelize(pts, cfg.backbone.grid, cfg.backbone.init_dim)
    write_voxel_dump(args.out, vs)
    print(f"{len(pts)} points -> {len(vs)} voxels, grid {cfg.backbone.grid.shape}")


def cmd_partition_dump(args):
    cfg = _run_config(args)
    vs = _load_input(_existing(args, "--input"), cfg)
    if not 0 <= args.block < cfg.backbone.n_blocks:
        raise UsageError(f"--block must be in [0, {cfg.backbone.n_blocks})")
    bc = cfg.backbone.blocks[args.block]
    text = partition_table(vs, bc.window, bc.group_size, Axis[args.axis.upper()])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_forward(args):
    cfg = _run_config(args)
    vs = _load_input(_existing(args, "--input"), cfg)
    out, _, _ = backbone_vjp(vs, _params(args, cfg), cfg.backbone)
    check_finite("block.backbone_forward", out.feats)
    write_voxel_dump(args.out, out)
    print(f"{len(vs)} voxels in -> {len(out)} voxels out, C={out.channels}, grid {out.shape}")


def _pgm(path, img):
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape, np.uint8) if hi <= lo else np.round(255 * (img - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(scaled.tobytes())


def cmd_heatmap(args):
    from .voxelgen import feature_response

    cfg = _run_config(args)
    vs = _load_input(_existing(args, "--input"), cfg)
    _, _, trace = backbone_vjp(vs, _params(args, cfg), cfg.backbone)
    prefix = Path(args.out_prefix)
    for i, bo in enumerate(trace.block_outputs):
        H, W, _ = bo.shape
        img = np.zeros((H, W))
        seen = np.zeros((H, W), bool)
        resp = feature_response(bo)
        full = np.full((H, W), -np.inf)
        np.maximum.at(full, (bo.coords[:, 0], bo.coords[:, 1]), resp)
        seen[bo.coords[:, 0], bo.coords[:, 1]] = True
        img[seen] = full[seen]
        _pgm(f"{prefix}_block{i}.pgm", img)
        np.savetxt(f"{prefix}_block{i}.txt", img, fmt="%.6g")
        print(f"block {i}: {len(bo)} voxels, response range [{img[seen].min():.4g}, {img[seen].max():.4g}]")


def cmd_train(args):
    from dataclasses import replace

    from .harness.train import format_trace, train

    cfg = _run_config(args)
    tc = cfg.train
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.lr is not None:
        tc = replace(tc, lr=args.lr)
    out = open(args.out, "w") if args.out else sys.stdout

    def emit(rec):
        out.write(format_trace([rec]))
        out.flush()

    try:
        res = train(tc, callback=emit)
    except FloatingPointError as exc:
        raise ContractViolation("harness.train", str(exc)) from exc
    finally:
        if args.out:
            out.close()
    print(
        f"# loss {res.initial['loss']:.6g} -> {res.final['loss']:.6g}, "
        f"recall {res.initial['recall']:.4f} -> {res.final['recall']:.4f}",
        file=sys.stderr,
    )
    if args.save:
        save_checkpoint(args.save, res.params)


def cmd_grad_check(args):
    from .harness.gradcheck import KINDS, grad_check

    cfg = _run_config(args)
    kinds = KINDS if args.operator is None else (args.operator,)
    report = grad_check(kinds, cfg.seed)
    sys.stdout.write(report.format())
    mod = max(e for m, _, e in report.rows if not m.startswith(("backbone", "detector")))
    e2e = max(report.worst("backbone"), report.worst("detector"))
    print(f"# max per-module {mod:.3e} (tol 1e-4), end-to-end {e2e:.3e} (tol 1e-3)")
    if mod > 1e-4 or e2e > 1e-3:
        raise ContractViolation("harness.grad_check", "finite-difference mismatch above tolerance")


def bench_scan(kind, lengths, channels=16, state_dim=8, groups=1, repeats=5, seed=0):
    """Median wall time of the sequential scan per length, after one warm-up run."""
    from .linear_rnn import init_params, scan_forward

    rng = np.random.default_rng(seed)
    p = init_params(kind, channels, state_dim, rng)
    rows = []
    for T in lengths:
        x = rng.standard_normal((groups, T, channels))
        scan_forward(x, p)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            scan_forward(x, p)
            times.append(time.perf_counter() - t0)
        rows.append((T, statistics.median(times)))
    return rows


def cmd_bench(args):
    from threadpoolctl import threadpool_limits

    try:
        lengths = [int(t) for t in args.T.split(",")]
    except ValueError:
        raise UsageError(f"--T must be comma separated integers, got {args.T!r}")
    if any(t < 1 for t in lengths):
        raise UsageError("--T values must be positive")
    kinds = ("mamba", "retnet", "rwkv") if args.op == "all" else (args.op,)
    with threadpool_limits(args.threads or 1):
        print("# op T seconds seconds_per_token ratio_to_prev per_token_ratio")
        for kind in kinds:
            prev = None
            for T, t in bench_scan(kind, lengths, args.C, args.S, args.groups, args.repeats):
                if prev:
                    r, pt = t / prev[1], (t / T) / (prev[1] / prev[0])
                    extra = f"{r:.3f} {pt:.3f}"
                else:
                    extra = "- -"
                print(f"{kind} {T} {t:.6f} {t / T:.3e} {extra}")
                prev = (T, t)


def cmd_gen_scene(args):
    from .harness.scene import make_scene

    cfg = _run_config(args)
    sc = make_scene(cfg.seed, args.n_objects, cfg.backbone.grid)
    write_point_cloud(args.out, sc.points)
    if args.boxes:
        np.savetxt(args.boxes, sc.boxes, fmt="%.9g", header="cx cy cz l w h yaw")
    print(f"{len(sc.points)} points, {sc.n_objects} objects")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file, or a built-in name (default, toy)")
    common.add_argument("--seed", type=int, help="overrides LION_SEED and the config seed")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lion3d", description="Sparse voxel backbone with grouped linear recurrences.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("voxelize", parents=[common], help="point cloud -> voxel dump")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("partition-dump", parents=[common], help="window/group assignment table")
    s.add_argument("--input", required=True, help="point cloud or voxel dump")
    s.add_argument("--block", type=int, default=0)
    s.add_argument("--axis", choices=("x", "y"), default="x")
    s.add_argument("--out")
    s.set_defaults(func=cmd_partition_dump)

    ops = ("mamba", "retnet", "rwkv", "identity")
    for name, func, hlp in (("forward", cmd_forward, "run the backbone"), ("heatmap", cmd_heatmap, "per-block response maps")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--input", required=True, help="point cloud or voxel dump")
        s.add_argument("--operator", choices=ops)
        s.add_argument("--checkpoint")
        if name == "forward":
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--out-prefix", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("train", parents=[common], help="train on synthetic scenes")
    s.add_argument("--operator", choices=ops)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", help="trace file (default stdout)")
    s.add_argument("--save", help="write final parameters as a checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grad-check", parents=[common], help="VJPs vs finite differences")
    s.add_argument("--operator", choices=ops[:3])
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("bench", parents=[common], help="scan wall time vs sequence length")
    s.add_argument("--op", choices=("mamba", "retnet", "rwkv", "all"), default="all")
    s.add_argument("--T", default="1024,2048,4096")
    s.add_argument("--C", type=int, default=16)
    s.add_argument("--S", type=int, default=8)
    s.add_argument("--groups", type=int, default=1)
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gen-scene", parents=[common], help="write a synthetic point cloud")
    s.add_argument("--n-objects", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--boxes", help="also write ground-truth boxes as text")
    s.set_defaults(func=cmd_gen_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if args.threads is not None and args.command != "bench":
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as exc:
        print(f"lion3d: error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"lion3d: contract violation: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"lion3d: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
