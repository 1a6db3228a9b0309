"""Minimal center-heatmap head on a BEV projection, its loss, decoding and recall."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from ..linear_rnn._math import sigmoid, softplus
from ..voxelgrid import GridGeometry, VoxelSet

N_REG = 8  # dx, dy (cell units), z, log l, log w, log h, sin yaw, cos yaw
FOCAL_POWER = 2.0
HEAT_PRIOR = 0.1


@dataclass
class HeadParams:
    conv_w: np.ndarray  # (9 * C, hidden), rows ordered (ky, kx, c)
    conv_b: np.ndarray
    out_w: np.ndarray  # (hidden, n_classes + N_REG)
    out_b: np.ndarray


def init_head(channels, hidden=16, n_classes=1, rng=None) -> HeadParams:
    rng = np.random.default_rng(rng)
    b1 = np.sqrt(3.0 / (9 * channels))
    b2 = np.sqrt(3.0 / hidden)
    out_b = np.zeros(n_classes + N_REG)
    out_b[:n_classes] = np.log(HEAT_PRIOR / (1 - HEAT_PRIOR))
    return HeadParams(
        rng.uniform(-b1, b1, (9 * channels, hidden)),
        np.zeros(hidden),
        rng.uniform(-b2, b2, (hidden, n_classes + N_REG)),
        out_b,
    )


def bev_vjp(vs: VoxelSet, n_batches: int):
    """Max over z into a dense (B, H, W, C) grid; empty columns are zero."""
    H, W, _ = vs.shape
    C = vs.channels
    cells = (vs.batch * H + vs.coords[:, 0]) * W + vs.coords[:, 1]
    n_cells = n_batches * H * W
    flat = np.full((n_cells, C), -np.inf)
    np.maximum.at(flat, cells, vs.feats)
    occupied = np.isfinite(flat[:, 0])
    rows, cols = np.nonzero(vs.feats == flat[cells])
    winner = np.full((n_cells, C), len(vs), np.int64)
    # lowest voxel index wins ties
    np.minimum.at(winner, (cells[rows], cols), rows)
    flat[~occupied] = 0.0
    occ_cells = np.flatnonzero(occupied)

    def pullback(dbev):
        g = np.asarray(dbev).reshape(n_cells, C)
        out = np.zeros((len(vs), C))
        ch = np.broadcast_to(np.arange(C), (len(occ_cells), C))
        out[winner[occ_cells], ch] = g[occ_cells]
        return out

    return flat.reshape(n_batches, H, W, C), pullback


def _im2col(x):
    B, H, W, C = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([p[:, ky:ky + H, kx:kx + W] for ky in range(3) for kx in range(3)], axis=-1)


def _col2im(dcols, shape):
    B, H, W, C = shape
    dp = np.zeros((B, H + 2, W + 2, C))
    d = dcols.reshape(B, H, W, 9, C)
    for i, (ky, kx) in enumerate((ky, kx) for ky in range(3) for kx in range(3)):
        dp[:, ky:ky + H, kx:kx + W] += d[:, :, :, i]
    return dp[:, 1:-1, 1:-1]


def head_vjp(bev, hp: HeadParams):
    cols = _im2col(bev)
    pre = cols @ hp.conv_w + hp.conv_b
    hid = np.maximum(pre, 0.0)
    out = hid @ hp.out_w + hp.out_b

    def pullback(dout):
        axes = (0, 1, 2)
        g_out_w = np.einsum("bhwk,bhwo->ko", hid, dout)
        dhid = dout @ hp.out_w.T
        dpre = dhid * (pre > 0)
        g_conv_w = np.einsum("bhwk,bhwo->ko", cols, dpre)
        dbev = _col2im(dpre @ hp.conv_w.T, bev.shape)
        return dbev, HeadParams(g_conv_w, dpre.sum(axis=axes), g_out_w, dout.sum(axis=axes))

    return out, pullback


def head_forward(bev, hp: HeadParams):
    return head_vjp(bev, hp)[0]


# ---------------------------------------------------------------- targets


@dataclass
class Targets:
    heatmap: np.ndarray  # (B, H, W, n_classes)
    centers: np.ndarray  # (n, 3): batch, ix, iy
    classes: np.ndarray  # (n,)
    regression: np.ndarray  # (n, N_REG)


def gaussian_radius(l, w, cell) -> int:
    return max(1, int(min(l, w) / cell / 2))


def build_targets(scenes, geom: GridGeometry, bev_shape, n_classes=1) -> Targets:
    H, W = bev_shape
    lo = np.asarray(geom.range_min)
    cell = np.asarray(geom.voxel_size)
    heat = np.zeros((len(scenes), H, W, n_classes))
    centers, classes, reg = [], [], []
    gx, gy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for b, sc in enumerate(scenes):
        for box, cls in zip(sc.boxes, sc.classes):
            cx, cy, cz, l, w, h, yaw = box
            fx, fy = (cx - lo[0]) / cell[0], (cy - lo[1]) / cell[1]
            ix, iy = int(np.floor(fx)), int(np.floor(fy))
            if not (0 <= ix < H and 0 <= iy < W):
                continue
            r = gaussian_radius(l, w, cell[0])
            sigma = (2 * r + 1) / 6.0
            g = np.exp(-((gx - ix) ** 2 + (gy - iy) ** 2) / (2 * sigma * sigma))
            g[np.abs(gx - ix) > r] = 0.0
            g[np.abs(gy - iy) > r] = 0.0
            heat[b, :, :, cls] = np.maximum(heat[b, :, :, cls], g)
            centers.append((b, ix, iy))
            classes.append(int(cls))
            reg.append((fx - ix, fy - iy, cz, np.log(l), np.log(w), np.log(h), np.sin(yaw), np.cos(yaw)))
    return Targets(
        heat,
        np.asarray(centers, np.int64).reshape(-1, 3),
        np.asarray(classes, np.int64),
        np.asarray(reg, np.float64).reshape(-1, N_REG),
    )


# ---------------------------------------------------------------- loss


def _xlogy(x, y):
    return np.where(x > 0, x * np.log(np.where(x > 0, y, 1.0)), 0.0)


def focal_terms(logits, target):
    """Per-cell focal divergence |p - y|^2 * KL(y || p), zero exactly where p == y.

    At y = 1 this is the usual positive focal term, at y = 0 the usual
    negative (clutter-suppression) term.
    """
    p = sigmoid(logits)
    bce = softplus(logits) - target * logits
    entropy = -_xlogy(target, target) - _xlogy(1 - target, 1 - target)
    kl = np.maximum(bce - entropy, 0.0)
    diff = p - target
    weight = np.abs(diff) ** FOCAL_POWER
    loss = weight * kl
    dweight = FOCAL_POWER * np.abs(diff) ** (FOCAL_POWER - 1) * np.sign(diff) * p * (1 - p)
    grad = dweight * kl + weight * diff
    return loss, grad


def focal_divergence(prob, target):
    """``focal_terms`` evaluated from probabilities rather than logits."""
    prob = np.asarray(prob, dtype=np.float64)
    kl = _xlogy(target, target) - _xlogy(target, prob) + _xlogy(1 - target, 1 - target) - _xlogy(1 - target, 1 - prob)
    return np.abs(prob - target) ** FOCAL_POWER * kl


def detection_loss(out, targets: Targets, reg_weight=0.25):
    """Return (loss, d loss / d out, parts) for head outputs ``out``."""
    n_cls = targets.heatmap.shape[-1]
    n_pos = max(1, len(targets.centers))
    cell_loss, cell_grad = focal_terms(out[..., :n_cls], targets.heatmap)
    focal = cell_loss.sum() / n_pos
    dout = np.zeros_like(out)
    dout[..., :n_cls] = cell_grad / n_pos

    reg = 0.0
    if len(targets.centers):
        b, ix, iy = targets.centers.T
        pred = out[b, ix, iy, n_cls:]
        diff = pred - targets.regression
        reg = reg_weight * np.abs(diff).sum() / (n_pos * N_REG)
        np.add.at(dout, (b, ix, iy), np.concatenate([np.zeros((len(b), n_cls)), reg_weight * np.sign(diff) / (n_pos * N_REG)], axis=1))
    return focal + reg, dout, {"focal": focal, "reg": reg}


# ---------------------------------------------------------------- decoding


def decode_peaks(out, n_classes=1, score_threshold=0.3, max_dets=50):
    """Local maxima of the class heatmaps: list per scene of (class, ix, iy, score)."""
    heat = sigmoid(out[..., :n_classes])
    dets = []
    for b in range(heat.shape[0]):
        hb = heat[b]
        peak = (hb == maximum_filter(hb, size=(3, 3, 1), mode="constant", cval=-1.0)) & (hb >= score_threshold)
        ix, iy, cls = np.nonzero(peak)
        scores = hb[ix, iy, cls]
        order = np.lexsort((iy, ix, -scores))[:max_dets]
        dets.append([(int(cls[i]), int(ix[i]), int(iy[i]), float(scores[i])) for i in order])
    return dets


def center_recall(dets, targets: Targets, radius=1):
    """Fraction of ground-truth centers matched by a same-class peak within ``radius`` cells."""
    if len(targets.centers) == 0:
        return 1.0
    used = [np.zeros(len(d), bool) for d in dets]
    hits = 0
    for (b, ix, iy), cls in zip(targets.centers, targets.classes):
        for j, (dc, dx, dy, _) in enumerate(dets[b]):
            if not used[b][j] and dc == cls and abs(dx - ix) <= radius and abs(dy - iy) <= radius:
                used[b][j] = True
                hits += 1
                break
    return hits / len(targets.centers)


def logits_from_heatmap(heatmap, eps=1e-12):
    """Logits whose sigmoid reproduces ``heatmap`` (clipped away from 0/1)."""
    p = np.clip(heatmap, eps, 1 - eps)
    return np.log(p) - np.log1p(-p)
