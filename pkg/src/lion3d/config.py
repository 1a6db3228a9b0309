"""INI-style run configuration.

Schema (every key optional, defaults from ``default.cfg``):

    [grid]      range_min, range_max, voxel_size    three floats each
    [backbone]  n_blocks, channels, operator (mamba|retnet|rwkv|identity),
                state_dim, ratio, init_dim, height_merge
    [blocks]    window_x, window_y, window_z, group_size
                one value (shared by every block) or one per block
    [train]     n_scenes, n_objects, batch_size, steps, lr, hidden, reg_weight
    [run]       seed
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .block import BackboneConfig, BlockConfig
from .errors import ContractViolation
from .harness.train import TrainConfig
from .voxelgrid import GridGeometry
from .windowing import WindowShape

WHERE = "config.load"


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    train: TrainConfig
    seed: int = 0

    def with_overrides(self, operator=None, seed=None) -> "RunConfig":
        bb = self.backbone if operator is None else replace(self.backbone, operator=operator)
        seed = self.seed if seed is None else int(seed)
        bb = replace(bb, seed=seed)
        return RunConfig(bb, replace(self.train, backbone=bb, seed=seed), seed)


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("lion3d") / "configs" / f"{name}.cfg"))


def _floats(text, n=None):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} values, got {len(vals)}")
    return tuple(vals)


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _per_block(text, n, key):
    vals = _ints(text)
    if len(vals) == 1:
        return vals * n
    if len(vals) != n:
        raise ContractViolation(WHERE, f"[blocks] {key} needs 1 or {n} values, got {len(vals)}")
    return vals


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(builtin_path("default").read_text())
        cp.read_string(text)
        g, b, k, t = cp["grid"], cp["backbone"], cp["blocks"], cp["train"]
        grid = GridGeometry(_floats(g["range_min"], 3), _floats(g["range_max"], 3), _floats(g["voxel_size"], 3))
        n = b.getint("n_blocks")
        if n < 1:
            raise ContractViolation(WHERE, "n_blocks must be >= 1")
        wx = _per_block(k["window_x"], n, "window_x")
        wy = _per_block(k["window_y"], n, "window_y")
        wz = _per_block(k["window_z"], n, "window_z")
        ks = _per_block(k["group_size"], n, "group_size")
        blocks = tuple(BlockConfig(WindowShape(*w), kk) for *w, kk in zip(wx, wy, wz, ks))
        seed = cp["run"].getint("seed")
        bb = BackboneConfig(
            grid,
            blocks,
            channels=b.getint("channels"),
            ratio=b.getfloat("ratio"),
            operator=b["operator"].strip().lower(),
            state_dim=b.getint("state_dim"),
            init_dim=b.getint("init_dim"),
            height_merge=b.getboolean("height_merge"),
            seed=seed,
        )
        tr = TrainConfig(
            bb,
            n_scenes=t.getint("n_scenes"),
            n_objects=t.getint("n_objects"),
            batch_size=t.getint("batch_size"),
            steps=t.getint("steps"),
            lr=t.getfloat("lr"),
            hidden=t.getint("hidden"),
            reg_weight=t.getfloat("reg_weight"),
            seed=seed,
        )
    except ContractViolation:
        raise
    except (configparser.Error, KeyError, ValueError, TypeError) as exc:
        raise ContractViolation(WHERE, f"malformed config: {exc}") from exc
    if tr.batch_size < 1 or tr.n_scenes < tr.batch_size:
        raise ContractViolation(WHERE, "need 1 <= batch_size <= n_scenes")
    return RunConfig(bb, tr, seed)


def load_config(path=None) -> RunConfig:
    """Parse a config file; ``None`` gives the built-in defaults, a bare name a built-in file."""
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.exists() and builtin_path(str(path)).exists():
        p = builtin_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ContractViolation(WHERE, f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
