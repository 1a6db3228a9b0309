import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lion3d.block import init_backbone
from lion3d.harness import head as H
from lion3d.harness.optim import Adam, trainable
from lion3d.harness.scene import make_scene, make_scenes
from lion3d.harness.train import (
    Batcher,
    evaluate,
    forward_loss,
    format_trace,
    init_detector,
    toy_backbone,
    toy_config,
    train,
)
from lion3d.tree import iter_arrays
from lion3d.voxelgrid import voxelize

GRID = toy_backbone().grid


def small_cfg(operator="mamba", **kw):
    base = dict(channels=4, group_size=64, n_scenes=2, batch_size=2, n_objects=2, hidden=4, steps=3)
    base.update(kw)
    return toy_config(operator, **base)


def test_scene_is_deterministic():
    a, b = make_scene(11, 3, GRID), make_scene(11, 3, GRID)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.boxes, b.boxes)
    assert not np.array_equal(a.points, make_scene(12, 3, GRID).points)


def test_scene_without_objects_is_clutter_only():
    sc = make_scene(0, 0, GRID)
    assert sc.n_objects == 0 and len(sc.points) > 0
    lo, hi = np.asarray(GRID.range_min), np.asarray(GRID.range_max)
    assert ((sc.points[:, :3] >= lo) & (sc.points[:, :3] <= hi)).all()


def test_every_center_cell_is_occupied():
    for scene in make_scenes(0, 100, 3, GRID):
        vs = voxelize(scene.points, GRID, 4)
        cols = set(map(tuple, vs.coords[:, :2].tolist()))
        t = H.build_targets([scene], GRID, GRID.shape[:2])
        assert len(t.centers) == scene.n_objects
        for _, ix, iy in t.centers:
            assert (ix, iy) in cols


def test_targets_peak_at_centers():
    scene = make_scene(3, 3, GRID)
    t = H.build_targets([scene], GRID, GRID.shape[:2])
    for b, ix, iy in t.centers:
        assert t.heatmap[b, ix, iy, 0] == 1.0
    assert t.heatmap.max() == 1.0 and t.heatmap.min() == 0.0


probs = st.floats(1e-6, 1 - 1e-6)


@given(probs)
def test_focal_divergence_zero_at_target(p):
    assert H.focal_divergence(np.array([p]), np.array([p]))[0] == 0.0


@given(st.floats(-8, 8), st.floats(0, 1))
def test_focal_terms_agree_with_probability_form(z, y):
    loss, _ = H.focal_terms(np.array([z]), np.array([y]))
    p = 1 / (1 + math.exp(-z))
    want = H.focal_divergence(np.array([p]), np.array([y]))[0]
    assert loss[0] >= 0
    assert abs(loss[0] - want) <= 1e-9 * max(1.0, abs(want))


@given(st.floats(-6, 6), st.floats(0, 1))
def test_focal_terms_gradient(z, y):
    _, g = H.focal_terms(np.array([z]), np.array([y]))
    h = 1e-6
    lp, _ = H.focal_terms(np.array([z + h]), np.array([y]))
    lm, _ = H.focal_terms(np.array([z - h]), np.array([y]))
    assert abs(g[0] - (lp[0] - lm[0]) / (2 * h)) <= 1e-6


def brute_loss(out, targets, reg_weight):
    B, Hh, W, _ = out.shape
    n_pos = max(1, len(targets.centers))
    focal = 0.0
    for b in range(B):
        for i in range(Hh):
            for j in range(W):
                z = out[b, i, j, 0]
                y = targets.heatmap[b, i, j, 0]
                p = 1 / (1 + math.exp(-z))
                kl = (y * math.log(y / p) if y > 0 else 0.0) + ((1 - y) * math.log((1 - y) / (1 - p)) if y < 1 else 0.0)
                focal += (p - y) ** 2 * kl
    reg = 0.0
    for (b, i, j), r in zip(targets.centers, targets.regression):
        reg += sum(abs(out[b, i, j, 1 + k] - r[k]) for k in range(H.N_REG))
    return focal / n_pos + reg_weight * reg / (n_pos * H.N_REG)


def test_loss_matches_per_cell_sum():
    rng = np.random.default_rng(0)
    scenes = make_scenes(5, 2, 3, GRID)
    t = H.build_targets(scenes, GRID, (32, 32))
    out = rng.standard_normal((2, 32, 32, 1 + H.N_REG))
    loss, _, parts = H.detection_loss(out, t, 0.25)
    assert abs(loss - brute_loss(out, t, 0.25)) <= 1e-10 * loss


def test_empty_scene_loss_is_clutter_term_only():
    rng = np.random.default_rng(1)
    t = H.build_targets([make_scene(0, 0, GRID)], GRID, (32, 32))
    assert len(t.centers) == 0 and not t.heatmap.any()
    out = rng.standard_normal((1, 32, 32, 1 + H.N_REG))
    loss, dout, parts = H.detection_loss(out, t)
    p = 1 / (1 + np.exp(-out[..., 0]))
    want = (p ** 2 * -np.log1p(-p)).sum()
    assert parts["reg"] == 0.0 and abs(loss - want) <= 1e-10 * want
    assert not dout[..., 1:].any()


def test_detection_loss_gradient():
    rng = np.random.default_rng(2)
    t = H.build_targets(make_scenes(1, 1, 2, GRID), GRID, (32, 32))
    out = rng.standard_normal((1, 32, 32, 1 + H.N_REG)) * 0.5
    _, dout, _ = H.detection_loss(out, t)
    h = 1e-6
    for idx in [(0, *t.centers[0, 1:], 0), (0, 3, 4, 0), (0, *t.centers[1, 1:], 3)]:
        up, dn = out.copy(), out.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (H.detection_loss(up, t)[0] - H.detection_loss(dn, t)[0]) / (2 * h)
        assert abs(fd - dout[idx]) <= 1e-6


def test_perfect_prediction_has_full_recall():
    scenes = make_scenes(7, 4, 3, GRID)
    t = H.build_targets(scenes, GRID, (32, 32))
    out = np.zeros((4, 32, 32, 1 + H.N_REG))
    out[..., 0] = H.logits_from_heatmap(t.heatmap[..., 0])
    assert H.center_recall(H.decode_peaks(out), t) == 1.0
    out[..., 0] = -20.0
    assert H.center_recall(H.decode_peaks(out), t) == 0.0


def test_recall_without_objects():
    t = H.build_targets([make_scene(0, 0, GRID)], GRID, (32, 32))
    assert H.center_recall([[]], t) == 1.0


def test_bev_takes_column_max():
    rng = np.random.default_rng(3)
    vs = voxelize(make_scene(2, 2, GRID).points, GRID, 4)
    vs = vs.with_feats(rng.standard_normal(vs.feats.shape))
    bev, _ = H.bev_vjp(vs, 1)
    for x, y in {tuple(c) for c in vs.coords[:20, :2].tolist()}:
        sel = (vs.coords[:, 0] == x) & (vs.coords[:, 1] == y)
        assert np.array_equal(bev[0, x, y], vs.feats[sel].max(axis=0))
    occupied = np.zeros((32, 32), bool)
    occupied[vs.coords[:, 0], vs.coords[:, 1]] = True
    assert not bev[0][~occupied].any()


def test_adam_skips_frozen_leaves():
    params = init_backbone(toy_backbone("retnet", channels=4, n_blocks=1))
    before = {n: a.copy() for n, a in iter_arrays(params)}
    frozen = [n for n in before if not trainable(n)]
    assert frozen and all(n.endswith("gamma") for n in frozen)
    grads = init_backbone(toy_backbone("retnet", channels=4, n_blocks=1))
    for _, g in iter_arrays(grads):
        g[...] = 1.0
    Adam(params, lr=0.1).step(grads)
    after = dict(iter_arrays(params))
    for n in before:
        assert np.array_equal(before[n], after[n]) == (n in frozen)


def test_adam_first_step_moves_by_lr():
    params = init_backbone(toy_backbone("mamba", channels=4, n_blocks=1))
    before = {n: a.copy() for n, a in iter_arrays(params)}
    grads = init_backbone(toy_backbone("mamba", channels=4, n_blocks=1))
    for _, g in iter_arrays(grads):
        g[...] = -3.0
    Adam(params, lr=0.01).step(grads)
    for n, a in iter_arrays(params):
        assert np.allclose(a - before[n], 0.01, rtol=1e-6)


@pytest.fixture(scope="module")
def short_run():
    cfg = small_cfg()
    return cfg, train(cfg)


def test_step_zero_loss_is_initial_forward_loss(short_run):
    cfg, res = short_run
    batcher = Batcher(make_scenes(cfg.seed, cfg.n_scenes, cfg.n_objects, cfg.backbone.grid), cfg.backbone)
    vs, targets, n = batcher.batch(range(cfg.n_scenes))
    loss, _, _ = forward_loss(init_detector(cfg), cfg.backbone, vs, targets, n, cfg.reg_weight, need_grad=False)
    assert res.trace[0]["loss"] == loss == res.initial["loss"]
    final = evaluate(res.params, cfg, batcher)
    assert final == res.final


def test_trace_is_deterministic(short_run):
    cfg, res = short_run
    again = train(cfg)
    assert format_trace(again.trace) == format_trace(res.trace)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(iter_arrays(again.params), iter_arrays(res.params)))
    lines = format_trace(res.trace).splitlines()
    assert len(lines) == cfg.steps and lines[0].split()[0] == "0"


def test_zero_learning_rate_gives_flat_trace():
    res = train(small_cfg("retnet", lr=0.0))
    losses = [r["loss"] for r in res.trace]
    assert losses == [losses[0]] * len(losses)


def test_different_seeds_differ(short_run):
    cfg, res = short_run
    other = train(cfg, seed=1)
    assert other.trace[0]["loss"] != res.trace[0]["loss"]


@pytest.mark.parametrize("operator", ["retnet", "rwkv", "identity"])
def test_training_runs_for_every_operator(operator):
    res = train(small_cfg(operator, steps=2))
    assert len(res.trace) == 2 and all(np.isfinite(r["loss"]) for r in res.trace)
