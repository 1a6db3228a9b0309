"""Deterministic synthetic LiDAR-like scenes: boxes sampled on their surfaces plus clutter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..voxelgrid import GridGeometry

# (length, width, height) ranges in meters per class
CLASS_SIZES = {
    0: ((3.2, 4.6), (1.6, 2.0), (1.4, 1.8)),
}


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    boxes: np.ndarray  # (n, 7): cx, cy, cz, l, w, h, yaw
    classes: np.ndarray  # (n,)

    @property
    def n_objects(self) -> int:
        return len(self.boxes)


def _ground(geom: GridGeometry) -> float:
    lo, hi = geom.range_min[2], geom.range_max[2]
    return 0.0 if lo <= 0.0 < hi else lo


def _box_surface_points(rng, box, n):
    cx, cy, cz, l, w, h, yaw = box
    # side faces (+-x, +-y) and the top face, chosen proportionally to area
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    local = u * np.array([l, w, h])
    local[face == 0, 0] = -l / 2
    local[face == 1, 0] = l / 2
    local[face == 2, 1] = -w / 2
    local[face == 3, 1] = w / 2
    local[face == 4, 2] = h / 2
    # the top-face center is always sampled so the center column is occupied
    local = np.vstack([local, [0.0, 0.0, h / 2 - 1e-6]])
    c, s = np.cos(yaw), np.sin(yaw)
    xy = local[:, :2] @ np.array([[c, s], [-s, c]])
    return np.column_stack([xy[:, 0] + cx, xy[:, 1] + cy, local[:, 2] + cz])


def make_scene(
    seed,
    n_objects: int,
    geom: GridGeometry,
    n_clutter: int = 150,
    points_per_object: int = 120,
    n_poles: int = 4,
) -> SyntheticScene:
    """Sample a scene; identical seeds give bit-identical scenes."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(geom.range_min)
    hi = np.asarray(geom.range_max)
    vs = np.asarray(geom.voxel_size)
    ground = _ground(geom)

    boxes = []
    tries = 0
    while len(boxes) < n_objects and tries < 1000:
        tries += 1
        (l0, l1), (w0, w1), (h0, h1) = CLASS_SIZES[0]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        h = min(h, hi[2] - ground - vs[2])
        radius = 0.5 * np.hypot(l, w)
        margin = radius + vs[:2].max()
        if np.any(hi[:2] - lo[:2] <= 2 * margin):
            break
        cx, cy = rng.uniform(lo[:2] + margin, hi[:2] - margin)
        if any(np.hypot(cx - b[0], cy - b[1]) < radius + 0.5 * np.hypot(b[3], b[4]) + 0.5 for b in boxes):
            continue
        boxes.append((cx, cy, ground + h / 2, l, w, h, rng.uniform(-np.pi, np.pi)))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)

    parts = [_box_surface_points(rng, b, points_per_object) for b in boxes]
    for _ in range(n_poles):
        px, py = rng.uniform(lo[:2], hi[:2])
        ph = rng.uniform(0.5, hi[2] - ground)
        k = 12
        parts.append(
            np.column_stack(
                [px + rng.uniform(-0.1, 0.1, k), py + rng.uniform(-0.1, 0.1, k), ground + rng.uniform(0, ph, k)]
            )
        )
    parts.append(rng.uniform(lo, hi, size=(n_clutter, 3)))
    xyz = np.vstack(parts) if parts else np.zeros((0, 3))
    pts = np.column_stack([xyz, rng.uniform(0.0, 1.0, len(xyz))])
    return SyntheticScene(pts, boxes, np.zeros(len(boxes), np.int64))


def make_scenes(seed, n_scenes, n_objects, geom, **kwargs) -> list[SyntheticScene]:
    seeds = np.random.SeedSequence(seed).spawn(n_scenes)
    return [make_scene(s, n_objects, geom, **kwargs) for s in seeds]
