"""Voxel merging (mean down-sampling) and expanding (broadcast up-sampling)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .voxelgrid import VoxelSet, _linear_keys


@dataclass(frozen=True, eq=False)
class MergeMapping:
    stride: tuple[int, int, int]
    fine_to_coarse: np.ndarray
    coarse_coords: np.ndarray
    coarse_batch: np.ndarray
    coarse_counts: np.ndarray
    fine_coords: np.ndarray
    fine_batch: np.ndarray
    fine_shape: tuple[int, int, int]

    @property
    def n_fine(self) -> int:
        return len(self.fine_to_coarse)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_counts)


def coarse_shape(shape, stride):
    return tuple(-(-int(s) // int(k)) for s, k in zip(shape, stride))


def build_mapping(vs: VoxelSet, stride) -> MergeMapping:
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or any(s not in (1, 2) for s in stride):
        raise ContractViolation("hierarchy.merge", f"stride components must be 1 or 2, got {stride}")
    cshape = coarse_shape(vs.shape, stride)
    ccoords = vs.coords // np.asarray(stride)
    keys = _linear_keys(ccoords, vs.batch, cshape)
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    return MergeMapping(stride, inverse.astype(np.int64), ccoords[first], vs.batch[first], counts, vs.coords, vs.batch, vs.shape)


def merge_feats(feats, m: MergeMapping):
    sums = np.zeros((m.n_coarse, feats.shape[1]))
    # np.add.at accumulates in ascending fine index, which fixes the summation order
    np.add.at(sums, m.fine_to_coarse, feats)
    return sums / m.coarse_counts[:, None]


def merge_backward(grad_coarse, m: MergeMapping):
    """Mean-pool VJP: each child gets its parent's gradient divided by the child count."""
    g = np.asarray(grad_coarse)
    return (g / m.coarse_counts[:, None])[m.fine_to_coarse]


def merge(vs: VoxelSet, stride) -> tuple[VoxelSet, MergeMapping]:
    """Floor-divide coordinates by ``stride`` and average the features of voxels that collide."""
    m = build_mapping(vs, stride)
    coarse = VoxelSet(m.coarse_coords, merge_feats(vs.feats, m), coarse_shape(vs.shape, m.stride), m.coarse_batch)
    return coarse, m


def expand_feats(coarse_feats, m: MergeMapping):
    return np.asarray(coarse_feats)[m.fine_to_coarse]


def expand_backward(grad_fine, m: MergeMapping):
    """Broadcast VJP: scatter-sum of child gradients into their parent."""
    g = np.asarray(grad_fine)
    out = np.zeros((m.n_coarse, g.shape[1]))
    np.add.at(out, m.fine_to_coarse, g)
    return out


def expand(coarse: VoxelSet, m: MergeMapping) -> VoxelSet:
    """Copy each coarse feature back to every fine voxel that was merged into it."""
    if len(coarse) != m.n_coarse or not np.array_equal(coarse.coords, m.coarse_coords) or not np.array_equal(
        coarse.batch, m.coarse_batch
    ):
        raise ContractViolation("hierarchy.expand", "coarse voxel set does not match the merge mapping")
    return VoxelSet(m.fine_coords, expand_feats(coarse.feats, m), m.fine_shape, m.fine_batch)
