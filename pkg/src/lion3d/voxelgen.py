"""Voxel generation: pick high-response voxels and seed zero-feature voxels at their diagonals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .voxelgrid import VoxelSet

DIFFUSION_OFFSETS = ((-1, -1, 0), (1, 1, 0), (1, -1, 0), (-1, 1, 0))


@dataclass(frozen=True)
class DiffusionSpec:
    ratio: float = 0.2
    offsets: tuple = DIFFUSION_OFFSETS

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractViolation("voxelgen.DiffusionSpec", f"ratio must lie in [0, 1], got {self.ratio}")
        if tuple(map(tuple, self.offsets)) != DIFFUSION_OFFSETS:
            raise ContractViolation("voxelgen.DiffusionSpec", "offsets must be the four XY diagonals")


def feature_response(vs: VoxelSet) -> np.ndarray:
    """Per-voxel mean over channels."""
    if vs.channels < 1:
        raise ContractViolation("voxelgen.feature_response", "need at least one channel")
    return vs.feats.mean(axis=1)


def foreground_count(ratio: float, n: int) -> int:
    # the epsilon guards products like 0.29 * 100 that land just under an integer
    return min(n, int(math.floor(ratio * n + 1e-9)))


def select_foreground(resp, ratio: float, coords=None, batch=None) -> np.ndarray:
    """Indices of the floor(ratio * L) largest responses, in descending order.

    Ties go to the lexicographically smaller coordinate (then lower index).
    With ``batch`` the selection is made independently within each scene.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolation("voxelgen.select_foreground", f"ratio must lie in [0, 1], got {ratio}")
    resp = np.asarray(resp, dtype=np.float64)
    L = len(resp)
    coords = np.zeros((L, 3), np.int64) if coords is None else np.asarray(coords)
    batch = np.zeros(L, np.int64) if batch is None else np.asarray(batch)
    picked = []
    for b in np.unique(batch):
        idx = np.flatnonzero(batch == b)
        m = foreground_count(ratio, len(idx))
        if m == 0:
            continue
        c = coords[idx]
        order = np.lexsort((idx, c[:, 2], c[:, 1], c[:, 0], -resp[idx]))
        picked.append(idx[order[:m]])
    return np.concatenate(picked) if picked else np.zeros(0, np.int64)


def diffuse(vs: VoxelSet, selected, spec: DiffusionSpec | None = None) -> VoxelSet:
    """Append zero-feature voxels at the four diagonal neighbors of each selected voxel.

    Candidates that fall outside the grid or onto an occupied voxel are
    dropped; among duplicate candidates the earliest in (selection order,
    offset order) survives. New voxels are laid out after the originals,
    grouped by offset and then by selection order.
    """
    spec = spec or DiffusionSpec()
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) and (selected.min() < 0 or selected.max() >= len(vs)):
        raise ContractViolation("voxelgen.diffuse", "selected index out of range")
    n_sel = len(selected)
    if n_sel == 0:
        return vs
    offsets = np.asarray(spec.offsets, np.int64)
    # candidate (o, s) sits at row o * n_sel + s: offset-major output layout
    cand = (vs.coords[selected][None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    cand_batch = np.tile(vs.batch[selected], len(offsets))
    priority = (np.arange(n_sel)[None, :] * len(offsets) + np.arange(len(offsets))[:, None]).reshape(-1)

    inb = ((cand >= 0) & (cand < np.asarray(vs.shape))).all(axis=1)
    free = np.zeros(len(cand), bool)
    free[inb] = vs.find(cand[inb], cand_batch[inb]) < 0
    rows = np.flatnonzero(free)
    if len(rows) == 0:
        return vs

    H, W, D = vs.shape
    keys = ((cand_batch[rows] * H + cand[rows, 0]) * W + cand[rows, 1]) * D + cand[rows, 2]
    by_priority = rows[np.lexsort((priority[rows], keys))]
    sorted_keys = np.sort(keys)
    first = np.r_[True, sorted_keys[1:] != sorted_keys[:-1]]
    keep = np.sort(by_priority[first])

    coords = np.concatenate([vs.coords, cand[keep]])
    feats = np.concatenate([vs.feats, np.zeros((len(keep), vs.channels))])
    batch = np.concatenate([vs.batch, cand_batch[keep]])
    return VoxelSet(coords, feats, vs.shape, batch)


def diffuse_backward(grad_out, n_original: int):
    """Diffusion only appends constant rows, so the input gradient is the leading block."""
    return np.asarray(grad_out)[:n_original]


def generate(vs: VoxelSet, spec: DiffusionSpec, next_block=None) -> VoxelSet:
    """Select, diffuse, and hand the densified set to ``next_block`` (if given)."""
    sel = select_foreground(feature_response(vs), spec.ratio, vs.coords, vs.batch)
    dense = diffuse(vs, sel, spec)
    return next_block(dense) if next_block is not None else dense
