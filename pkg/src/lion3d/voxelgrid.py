"""Sparse voxel grid: geometry, the VoxelSet container, voxelization and I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ContractViolation

PC_MAGIC = b"LIONPC1\0"
VX_MAGIC = b"LIONVX1\0"


@dataclass(frozen=True)
class GridGeometry:
    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        lo, hi, vs = (np.asarray(a, dtype=np.float64) for a in (self.range_min, self.range_max, self.voxel_size))
        if lo.shape != (3,) or hi.shape != (3,) or vs.shape != (3,):
            raise ContractViolation("voxelgrid.GridGeometry", "range and voxel size need three components")
        if not (vs > 0).all():
            raise ContractViolation("voxelgrid.GridGeometry", f"voxel_size must be positive, got {tuple(vs)}")
        if not (hi > lo).all():
            raise ContractViolation("voxelgrid.GridGeometry", "range_max must exceed range_min on every axis")
        object.__setattr__(self, "range_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "range_max", tuple(float(v) for v in hi))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in vs))

    @property
    def shape(self) -> tuple[int, int, int]:
        """Grid extents (H, W, D) along X, Y, Z."""
        # the tolerance absorbs decimal spans like 149.76 / 0.32
        return tuple(
            int(math.ceil((hi - lo) / vs - 1e-9))
            for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size)
        )


def _linear_keys(coords, batch, shape):
    H, W, D = shape
    c = coords.astype(np.int64)
    return ((batch.astype(np.int64) * H + c[:, 0]) * W + c[:, 1]) * D + c[:, 2]


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Distinct integer voxel coordinates with one feature row per voxel.

    ``batch`` tags each voxel with its scene so several scenes can share one
    set; single-scene sets keep it all-zero. Arrays are read-only.
    """

    coords: np.ndarray
    feats: np.ndarray
    shape: tuple[int, int, int]
    batch: np.ndarray = field(default=None)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.array(self.feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(coords), -1)
        batch = np.zeros(len(coords), np.int64) if self.batch is None else np.array(self.batch, dtype=np.int64)
        if feats.shape[0] != coords.shape[0] or batch.shape != (coords.shape[0],):
            raise ContractViolation(
                "voxelgrid.VoxelSet", f"row mismatch: {coords.shape[0]} coords, {feats.shape[0]} feature rows"
            )
        shape = tuple(int(s) for s in self.shape)
        for a in (coords, feats, batch):
            a.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        object.__setattr__(self, "batch", batch)
        object.__setattr__(self, "shape", shape)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def n_batches(self) -> int:
        return int(self.batch.max()) + 1 if len(self) else 0

    def with_feats(self, feats) -> "VoxelSet":
        return VoxelSet(self.coords, feats, self.shape, self.batch)

    @cached_property
    def keys(self) -> np.ndarray:
        return _linear_keys(self.coords, self.batch, self.shape)

    @cached_property
    def _sorted(self):
        order = np.argsort(self.keys, kind="stable")
        return self.keys[order], order

    @cached_property
    def lookup(self) -> dict:
        """Map from (cx, cy, cz) (or (b, cx, cy, cz) for multi-scene sets) to index."""
        if self.n_batches <= 1:
            return {tuple(c): i for i, c in enumerate(self.coords.tolist())}
        return {(b, *c): i for i, (b, c) in enumerate(zip(self.batch.tolist(), self.coords.tolist()))}

    def find(self, coords, batch=None) -> np.ndarray:
        """Vectorized lookup; returns -1 where a coordinate is absent or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        batch = np.zeros(len(coords), np.int64) if batch is None else np.asarray(batch, np.int64)
        out = np.full(len(coords), -1, dtype=np.int64)
        if len(self) == 0 or len(coords) == 0:
            return out
        inb = ((coords >= 0) & (coords < np.asarray(self.shape))).all(axis=1)
        keys = _linear_keys(coords[inb], batch[inb], self.shape)
        skeys, order = self._sorted
        pos = np.searchsorted(skeys, keys)
        pos_c = np.minimum(pos, len(skeys) - 1)
        hit = skeys[pos_c] == keys
        found = np.where(hit, order[pos_c], -1)
        out[inb] = found
        return out

    def validate(self):
        """Check the typed invariants; raises ContractViolation on breach."""
        if len(self) and ((self.coords < 0).any() or (self.coords >= np.asarray(self.shape)).any()):
            raise ContractViolation("voxelgrid.VoxelSet", "coordinate outside grid extents")
        if len(np.unique(self.keys)) != len(self):
            raise ContractViolation("voxelgrid.VoxelSet", "duplicate coordinates")
        return self


def empty_voxel_set(shape, channels) -> VoxelSet:
    return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, channels)), shape)


def lookup_coord(vs: VoxelSet, coord) -> int | None:
    return vs.lookup.get(tuple(int(c) for c in coord))


def concat_voxel_sets(sets) -> VoxelSet:
    """Stack single-scene sets into one multi-scene set, scene i -> batch id i."""
    sets = list(sets)
    if not sets:
        raise ContractViolation("voxelgrid.concat_voxel_sets", "need at least one set")
    shape = sets[0].shape
    if any(s.shape != shape for s in sets):
        raise ContractViolation("voxelgrid.concat_voxel_sets", "all sets must share grid extents")
    coords = np.concatenate([s.coords for s in sets])
    feats = np.concatenate([s.feats for s in sets])
    batch = np.concatenate([np.full(len(s), i, np.int64) for i, s in enumerate(sets)])
    return VoxelSet(coords, feats, shape, batch)


def split_voxel_set(vs: VoxelSet, n_batches=None) -> list[VoxelSet]:
    n = vs.n_batches if n_batches is None else n_batches
    return [VoxelSet(vs.coords[vs.batch == b], vs.feats[vs.batch == b], vs.shape) for b in range(n)]


def voxelize(points, geom: GridGeometry, init_dim: int = 4, batch=None, return_counts=False):
    """Mean-encode points into voxels.

    Each occupied voxel gets [mean x/y/z offset from the voxel center in
    voxel units, mean intensity], zero-padded to ``init_dim``. Binning is
    half-open, so points on ``range_max`` are dropped. Voxels come out in
    ascending linear-key order. Within a voxel, points are reduced in
    value order, so any permutation of the input gives bit-identical output.
    """
    if init_dim < 4:
        raise ContractViolation("voxelgrid.voxelize", f"init_dim must be >= 4, got {init_dim}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    batch = np.zeros(len(pts), np.int64) if batch is None else np.asarray(batch, np.int64)
    shape = geom.shape
    lo = np.asarray(geom.range_min)
    vsz = np.asarray(geom.voxel_size)

    finite = np.isfinite(pts).all(axis=1)
    rel = (pts[:, :3] - lo) / vsz
    idx = np.floor(np.where(finite[:, None], rel, -1.0)).astype(np.int64)
    keep = finite & (idx >= 0).all(axis=1) & (idx < np.asarray(shape)).all(axis=1)
    pts, idx, rel, batch = pts[keep], idx[keep], rel[keep], batch[keep]

    if len(pts) == 0:
        out = empty_voxel_set(shape, init_dim)
        return (out, np.zeros(0, np.int64)) if return_counts else out

    keys = _linear_keys(idx, batch, shape)
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], keys))
    skeys = keys[order]
    starts = np.flatnonzero(np.r_[True, skeys[1:] != skeys[:-1]])
    counts = np.diff(np.r_[starts, len(skeys)])

    offsets = rel[order] - (idx[order] + 0.5)
    vals = np.concatenate([offsets, pts[order, 3:4]], axis=1)
    sums = np.add.reduceat(vals, starts, axis=0)
    feats = np.zeros((len(starts), init_dim))
    feats[:, :4] = sums / counts[:, None]

    first = order[starts]
    out = VoxelSet(idx[first], feats, shape, batch[first])
    return (out, counts) if return_counts else out


def read_point_cloud(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != PC_MAGIC:
        raise ContractViolation("voxelgrid.read_point_cloud", f"{path}: bad magic, not a LIONPC1 file")
    (n,) = struct.unpack("<Q", data[8:16])
    if len(data) != 16 + n * 16:
        raise ContractViolation("voxelgrid.read_point_cloud", f"{path}: expected {n} points, size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, 4).astype(np.float64)


def write_point_cloud(path, points):
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 4))
    with open(path, "wb") as f:
        f.write(PC_MAGIC)
        f.write(struct.pack("<Q", len(pts)))
        f.write(pts.tobytes())


def write_voxel_dump(path, vs: VoxelSet):
    with open(path, "wb") as f:
        f.write(VX_MAGIC)
        f.write(struct.pack("<QI", len(vs), vs.channels))
        f.write(np.ascontiguousarray(vs.coords, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(vs.feats, dtype="<f4").tobytes())


def read_voxel_dump(path, shape=None) -> VoxelSet:
    """Read a voxel dump; without ``shape`` the extents are the coordinate bounding box."""
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != VX_MAGIC:
        raise ContractViolation("voxelgrid.read_voxel_dump", f"{path}: bad magic, not a LIONVX1 file")
    n, c = struct.unpack("<QI", data[8:20])
    if len(data) != 20 + n * 12 + n * c * 4:
        raise ContractViolation("voxelgrid.read_voxel_dump", f"{path}: size mismatch for L={n}, C={c}")
    coords = np.frombuffer(data, dtype="<i4", count=n * 3, offset=20).reshape(n, 3).astype(np.int64)
    feats = np.frombuffer(data, dtype="<f4", count=n * c, offset=20 + n * 12).reshape(n, c).astype(np.float64)
    if shape is None:
        shape = tuple(int(v) for v in (coords.max(axis=0) + 1)) if n else (1, 1, 1)
    return VoxelSet(coords, feats, shape)
