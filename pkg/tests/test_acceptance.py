"""Acceptance criteria 1-10.

Each criterion function returns an Outcome: a verdict, a one-line detail and
a fingerprint (sha256 over every array and number it computed). Criterion 10
reruns 1-9 and compares fingerprints. Wall-clock timings are reported but kept
out of fingerprints, since no two runs time alike.

Run under pytest, or directly with ``python3 tests/test_acceptance.py``.
"""
import hashlib
import math
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

from lion3d import hierarchy  # noqa: E402
from lion3d.block import BLOCK_STRIDE, HEIGHT_STRIDE, backbone_vjp, init_backbone, init_layer, lion_layer, full_scale_blocks  # noqa: E402
from lion3d.cli import bench_scan  # noqa: E402
from lion3d.harness.gradcheck import grad_check  # noqa: E402
from lion3d.harness.scene import make_scene  # noqa: E402
from lion3d.harness.train import format_trace, toy_backbone, toy_config, train  # noqa: E402
from lion3d.linear_rnn import init_params, scan_forward  # noqa: E402
from lion3d.spatial import init_subm_conv, subm_conv  # noqa: E402
from lion3d.tree import iter_arrays  # noqa: E402
from lion3d.voxelgen import DIFFUSION_OFFSETS, DiffusionSpec, feature_response, generate, select_foreground  # noqa: E402
from lion3d.voxelgrid import VoxelSet, voxelize  # noqa: E402
from lion3d.windowing import Axis, WindowShape, partition, window_index  # noqa: E402
from oracles import dense_conv3d, naive_scan, normwise_rel  # noqa: E402

KINDS = ("mamba", "retnet", "rwkv")
SEED = 20240


@dataclass
class Outcome:
    ok: bool
    detail: str
    fingerprint: str


class Digest:
    def __init__(self):
        self.h = hashlib.sha256()

    def add(self, *items):
        for x in items:
            if isinstance(x, np.ndarray):
                self.h.update(str((x.dtype, x.shape)).encode())
                self.h.update(np.ascontiguousarray(x).tobytes())
            else:
                self.h.update(repr(x).encode())

    def hex(self):
        return self.h.hexdigest()


def random_set(rng, n, shape, channels):
    keys = rng.choice(int(np.prod(shape)), n, replace=False)
    coords = np.column_stack(np.unravel_index(keys, shape))
    return VoxelSet(coords, rng.standard_normal((n, channels)), shape)


def criterion_1():
    rng = np.random.default_rng([SEED, 1])
    d = Digest()
    worst = 0.0
    t0 = time.perf_counter()
    for kind in KINDS:
        for _ in range(50):
            T, C, S = int(rng.integers(1, 257)), int(rng.integers(1, 17)), int(rng.integers(1, 9))
            p = init_params(kind, C, S, rng)
            x = rng.standard_normal((T, C))
            chunk = int(rng.integers(1, 65))
            want = naive_scan(kind, x, p.weights)
            seq, chunked = scan_forward(x, p), scan_forward(x, p, chunk_size=chunk)
            worst = max(worst, normwise_rel(seq, want), normwise_rel(chunked, want))
            d.add(kind, T, C, S, chunk, seq, chunked)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    return Outcome(ok, f"150 instances, max rel err {worst:.2e} (tol 1e-12), {elapsed:.1f} s (limit 10 s)", d.hex())


def criterion_2():
    t0 = time.perf_counter()
    report = grad_check(KINDS, seed=SEED)
    elapsed = time.perf_counter() - t0
    mod = max(e for m, _, e in report.rows if not m.startswith(("backbone", "detector")))
    e2e = max(report.worst("backbone"), report.worst("detector"))
    d = Digest()
    for row in report.rows:
        d.add(*row)
    ok = mod <= 1e-4 and e2e <= 1e-3 and elapsed < 120.0
    return Outcome(ok, f"per-module {mod:.2e} (tol 1e-4), end-to-end {e2e:.2e} (tol 1e-3), {elapsed:.0f} s (limit 120 s)", d.hex())


def criterion_3():
    rng = np.random.default_rng([SEED, 3])
    d = Digest()
    worst = 0.0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(1, 9, 3))
        n = int(rng.integers(1, np.prod(shape) + 1))
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        vs = random_set(rng, n, shape, cin)
        p = init_subm_conv(cin, cout, rng)
        p.bias[:] = rng.standard_normal(cout)
        out = subm_conv(vs, p)
        grid = np.zeros(shape + (cin,))
        grid[tuple(vs.coords.T)] = vs.feats
        want = dense_conv3d(grid, p.kernel, p.bias)[tuple(vs.coords.T)]
        worst = max(worst, normwise_rel(out.feats, want))
        if not np.array_equal(out.coords, vs.coords):
            worst = math.inf
        d.add(shape, out.feats)
    return Outcome(worst <= 1e-12, f"20 instances, max rel err {worst:.2e} (tol 1e-12)", d.hex())


def criterion_4():
    rng = np.random.default_rng([SEED, 4])
    d = Digest()
    failures = 0
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 17, 3))
        n = int(rng.integers(1, min(600, np.prod(shape)) + 1))
        vs = random_set(rng, n, shape, 3)
        for stride in (BLOCK_STRIDE, HEIGHT_STRIDE):
            coarse, m = hierarchy.merge(vs, stride)
            back = hierarchy.expand(coarse, m)
            coarse_set = set(map(tuple, (vs.coords // np.asarray(stride)).tolist()))
            good = (
                np.array_equal(back.coords, vs.coords)
                and back.shape == vs.shape
                and int(m.coarse_counts.sum()) == n
                and set(map(tuple, coarse.coords.tolist())) == coarse_set
                and len(coarse) == len(coarse_set)
            )
            failures += not good
            d.add(stride, coarse.coords, coarse.feats, m.coarse_counts, back.feats)
    return Outcome(failures == 0, f"100 instances x 2 strides, {failures} failures", d.hex())


def criterion_5():
    rng = np.random.default_rng([SEED, 5])
    d = Digest()
    failures, checked = 0, 0
    cases = [(K, None) for K in (1, 7, 256, 4096) for _ in range(4)]
    cases += [(b.group_size, b.window) for b in full_scale_blocks() for _ in range(2)]
    for K, window in cases:
        shape = (60, 60, 32)
        n = 5000 if checked % 4 == 0 else int(rng.integers(1, 5001))
        vs = random_set(rng, n, shape, 1)
        w = window or WindowShape(*(int(v) for v in rng.integers(1, 20, 3)))
        for axis in Axis:
            wp = partition(vs, w, K, axis)
            valid = wp.slots[~wp.pad_mask]
            good = (
                np.array_equal(np.sort(valid), np.arange(n))
                and len(wp.slots) % K == 0
                and wp.n_groups == -(-n // K)
                and all(len(wp.slots[s:s + K]) == K for s in wp.group_starts)
            )
            failures += not good
            checked += 1
            d.add(K, w.as_tuple(), axis.value, wp.slots, wp.pad_mask)
    return Outcome(failures == 0, f"{checked} partitions, K in (1, 7, 256, 4096, 2048, 1024, 512), {failures} failures", d.hex())


def criterion_6():
    rng = np.random.default_rng([SEED, 6])
    d = Digest()
    failures = 0
    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 13, 3))
        n = int(rng.integers(1, min(300, np.prod(shape)) + 1))
        vs = random_set(rng, n, shape, 3)
        for ratio in (0.0, 0.2, 0.5, 1.0):
            sel = select_foreground(feature_response(vs), ratio, vs.coords)
            out = generate(vs, DiffusionSpec(ratio))
            chosen = {tuple(c) for c in vs.coords[sel].tolist()}
            brute = set()
            for c in chosen:
                for o in DIFFUSION_OFFSETS:
                    cand = tuple(a + b for a, b in zip(c, o))
                    if all(0 <= v < s for v, s in zip(cand, shape)):
                        brute.add(cand)
            brute -= set(map(tuple, vs.coords.tolist()))
            all_coords = list(map(tuple, out.coords.tolist()))
            good = (
                len(sel) == math.floor(Fraction(str(ratio)) * n)
                and len(set(all_coords)) == len(all_coords)
                and np.array_equal(out.coords[:n], vs.coords)
                and set(all_coords[n:]) == brute
            )
            failures += not good
            d.add(ratio, sel, out.coords)
    return Outcome(failures == 0, f"200 instances x 4 ratios, {failures} failures", d.hex())


def criterion_7():
    d = Digest()
    notes = []
    ok = True
    for kind in KINDS:
        cfg = toy_backbone(kind)
        params = init_backbone(cfg)
        vs = voxelize(make_scene(SEED, 3, cfg.grid).points, cfg.grid, cfg.init_dim)
        bc = cfg.blocks[0]
        wp = partition(vs, bc.window, bc.group_size, Axis.X)
        windows = window_index(vs.coords, bc.window)[0]
        group = wp.slots[: bc.group_size][~wp.pad_mask[: bc.group_size]]
        v = int(group[0])
        others = [int(u) for u in group if (windows[u] != windows[v]).any()]
        bumped = vs.feats.copy()
        bumped[v, 0] += 0.1
        base, _, tb = backbone_vjp(vs, params, cfg)
        moved, _, tm = backbone_vjp(vs.with_feats(bumped), params, cfg)
        delta = np.abs(tm.block_outputs[0].feats[others] - tb.block_outputs[0].feats[others]).max(axis=1)
        reached = bool(others) and bool((delta > 0).all())

        # group isolation: K = 1 in one layer at full resolution
        rng = np.random.default_rng([SEED, 7])
        lp = init_layer(kind, vs.channels, 8, rng)
        a = lion_layer(vs, lp, bc.window, 1).feats
        b = lion_layer(vs.with_feats(bumped), lp, bc.window, 1).feats
        rest = np.arange(len(vs)) != v
        isolated = np.array_equal(a[rest], b[rest]) and not np.array_equal(a[v], b[v])
        ok &= reached and isolated
        notes.append(f"{kind}: {len(others)} cross-window peers reached={reached}, K=1 isolated={isolated}")
        d.add(kind, base.feats, moved.feats, delta, a, b)
    return Outcome(ok, "; ".join(notes), d.hex())


def criterion_8():
    d = Digest()
    notes = []
    ok = True
    with threadpool_limits(1):
        for kind in KINDS:
            (T1, t1), (T2, t2) = bench_scan(kind, [1024, 2048], channels=16, state_dim=8, groups=8, repeats=9)
            raw = t2 / t1
            per_token = (t2 / T2) / (t1 / T1)
            ok &= per_token <= 1.4
            notes.append(f"{kind}: per-token {per_token:.3f}, raw {raw:.3f}")
            # the timed computation itself must be reproducible
            rng = np.random.default_rng(0)
            p = init_params(kind, 16, 8, rng)
            for T in (1024, 2048):
                d.add(kind, T, scan_forward(rng.standard_normal((8, T, 16)), p))
    return Outcome(ok, "time(2048)/time(1024) " + "; ".join(notes) + " (per-token tol 1.4)", d.hex())


def criterion_9():
    t0 = time.perf_counter()
    lion = train(toy_config("mamba", seed=SEED))
    elapsed = time.perf_counter() - t0
    base = train(toy_config("identity", seed=SEED))
    d = Digest()
    for res in (lion, base):
        d.add(format_trace(res.trace), sorted(res.initial.items()), sorted(res.final.items()))
        for name, arr in iter_arrays(res.params):
            d.add(name, arr)
    li, lf = lion.initial, lion.final
    ok = lf["loss"] <= 0.5 * li["loss"] and lf["recall"] > base.final["recall"] and elapsed < 900.0
    detail = (
        f"loss {li['loss']:.4g} -> {lf['loss']:.4g} (ratio {lf['loss'] / li['loss']:.3f}, tol 0.5), "
        f"recall {lf['recall']:.3f} vs identity baseline {base.final['recall']:.3f}, "
        f"{len(lion.trace)} steps in {elapsed:.0f} s (limit 900 s)"
    )
    return Outcome(ok, detail, d.hex())


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
}
_first_run: dict = {}


def run_once(n) -> Outcome:
    if n not in _first_run:
        _first_run[n] = CRITERIA[n]()
    return _first_run[n]


def criterion_10():
    mismatched = []
    for n, fn in CRITERIA.items():
        first = run_once(n)
        again = fn()
        if again.fingerprint != first.fingerprint or again.ok != first.ok:
            mismatched.append(n)
    detail = "criteria 1-9 rerun: " + ("all fingerprints identical" if not mismatched else f"mismatch in {mismatched}")
    return Outcome(not mismatched, detail, "")


def report(n, outcome: Outcome):
    line = f"criterion {n}: {'PASS' if outcome.ok else 'FAIL'} - {outcome.detail}"
    print(line, flush=True)
    return line


@pytest.fixture
def emit(capsys):
    def _emit(n, outcome):
        with capsys.disabled():
            print()
            report(n, outcome)

    return _emit


@pytest.mark.parametrize("n", [1, 3, 4, 5, 6, 7, 8])
def test_criterion(n, emit):
    outcome = run_once(n)
    emit(n, outcome)
    assert outcome.ok, outcome.detail


@pytest.mark.slow
def test_criterion_2_gradients(emit):
    outcome = run_once(2)
    emit(2, outcome)
    assert outcome.ok, outcome.detail


@pytest.mark.slow
def test_criterion_9_training(emit):
    outcome = run_once(9)
    emit(9, outcome)
    assert outcome.ok, outcome.detail


@pytest.mark.slow
def test_criterion_10_determinism(emit):
    outcome = criterion_10()
    emit(10, outcome)
    assert outcome.ok, outcome.detail


if __name__ == "__main__":
    results = [run_once(n) for n in CRITERIA]
    for n, outcome in enumerate(results, start=1):
        report(n, outcome)
    tenth = criterion_10()
    report(10, tenth)
    sys.exit(0 if all(o.ok for o in results) and tenth.ok else 1)
