"""Window-based serialization of a VoxelSet into equal-size groups."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .voxelgrid import VoxelSet


class Axis(enum.Enum):
    X = "x"
    Y = "y"


@dataclass(frozen=True)
class WindowShape:
    tx: int
    ty: int
    tz: int

    def __post_init__(self):
        if min(self.tx, self.ty, self.tz) < 1:
            raise ContractViolation("windowing.WindowShape", f"window components must be >= 1, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.tx, self.ty, self.tz)


def window_index(coord, shape: WindowShape):
    """Split a coordinate into (window index, local index within the window)."""
    t = np.asarray(shape.as_tuple())
    c = np.asarray(coord, dtype=np.int64)
    return c // t, c % t


def sort_key(coord, shape: WindowShape, axis: Axis) -> tuple:
    """Composite ordering key of one voxel.

    X-major: (wy, wx, wz, lz, ly, lx), so consecutive windows advance along X
    and voxels inside a window run fastest along X. Y-major swaps the roles of
    X and Y.
    """
    (wx, wy, wz), (lx, ly, lz) = (tuple(int(v) for v in a) for a in window_index(coord, shape))
    if axis is Axis.X:
        return (wy, wx, wz, lz, ly, lx)
    return (wx, wy, wz, lz, lx, ly)


def _key_columns(coords, shape: WindowShape, axis: Axis):
    w, l = window_index(coords, shape)
    if axis is Axis.X:
        return [w[:, 1], w[:, 0], w[:, 2], l[:, 2], l[:, 1], l[:, 0]]
    return [w[:, 0], w[:, 1], w[:, 2], l[:, 2], l[:, 0], l[:, 1]]


@dataclass(frozen=True, eq=False)
class WindowPartition:
    """Serialization of a VoxelSet into groups of exactly ``group_size`` slots.

    ``slots`` holds the voxel index of every padded slot; ``pad_mask`` marks
    slots that replicate the last valid voxel of their group. Groups never
    straddle scenes of a multi-scene set.
    """

    axis: Axis
    order: np.ndarray
    group_size: int
    slots: np.ndarray
    pad_mask: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.slots) // self.group_size

    @property
    def group_starts(self) -> np.ndarray:
        return np.arange(self.n_groups) * self.group_size

    @property
    def padded_length(self) -> int:
        return len(self.slots)


def partition(vs: VoxelSet, shape: WindowShape, group_size: int, axis: Axis) -> WindowPartition:
    if group_size < 1:
        raise ContractViolation("windowing.partition", f"group size must be >= 1, got {group_size}")
    K = int(group_size)
    L = len(vs)
    if L == 0:
        empty = np.zeros(0, np.int64)
        return WindowPartition(axis, empty, K, empty, np.zeros(0, bool))

    cols = _key_columns(vs.coords, shape, axis)
    # np.lexsort sorts by the last key first
    order = np.lexsort(cols[::-1] + [vs.batch])

    sorted_batch = vs.batch[order]
    seg_starts = np.flatnonzero(np.r_[True, sorted_batch[1:] != sorted_batch[:-1]])
    seg_lens = np.diff(np.r_[seg_starts, L])
    padded_lens = -(-seg_lens // K) * K

    slots = np.empty(padded_lens.sum(), np.int64)
    pad = np.zeros(len(slots), bool)
    out = 0
    for start, n, n_pad in zip(seg_starts, seg_lens, padded_lens):
        seg = order[start:start + n]
        slots[out:out + n] = seg
        slots[out + n:out + n_pad] = seg[-1]
        pad[out + n:out + n_pad] = True
        out += n_pad
    return WindowPartition(axis, order, K, slots, pad)


def gather(feats, wp: WindowPartition) -> np.ndarray:
    """Read voxel features in partition order as a (groups, K, C) array."""
    feats = np.asarray(feats)
    return feats[wp.slots].reshape(wp.n_groups, wp.group_size, feats.shape[-1])


def gather_backward(grad_seq, wp: WindowPartition, n_voxels: int) -> np.ndarray:
    g = np.asarray(grad_seq).reshape(wp.padded_length, -1)
    out = np.zeros((n_voxels, g.shape[1]))
    np.add.at(out, wp.slots, g)
    return out


def scatter(seq, wp: WindowPartition, n_voxels: int) -> np.ndarray:
    """Write a (groups, K, C) sequence back to voxel rows, ignoring padded slots."""
    seq = np.asarray(seq)
    if seq.ndim != 3 or seq.shape[0] * seq.shape[1] != wp.padded_length or seq.shape[1] != wp.group_size:
        raise ContractViolation(
            "windowing.scatter", f"sequence shape {seq.shape} does not match partition ({wp.n_groups}, {wp.group_size}, C)"
        )
    flat = seq.reshape(wp.padded_length, -1)
    out = np.zeros((n_voxels, flat.shape[1]))
    valid = ~wp.pad_mask
    out[wp.slots[valid]] = flat[valid]
    return out


def scatter_backward(grad_feats, wp: WindowPartition) -> np.ndarray:
    g = np.asarray(grad_feats)
    out = np.zeros((wp.padded_length, g.shape[1]))
    valid = ~wp.pad_mask
    out[valid] = g[wp.slots[valid]]
    return out.reshape(wp.n_groups, wp.group_size, -1)


def partition_table(vs: VoxelSet, shape: WindowShape, group_size: int, axis: Axis) -> str:
    """Plain-text dump of a partition, one line per slot."""
    wp = partition(vs, shape, group_size, axis)
    K = wp.group_size
    lines = ["# index cx cy cz wx wy wz group slot pad"]
    for s, (i, p) in enumerate(zip(wp.slots.tolist(), wp.pad_mask.tolist())):
        c = vs.coords[i]
        w = c // np.asarray(shape.as_tuple())
        lines.append(f"{i} {c[0]} {c[1]} {c[2]} {w[0]} {w[1]} {w[2]} {s // K} {s % K} {int(p)}")
    return "\n".join(lines) + "\n"
