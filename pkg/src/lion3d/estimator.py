"""scikit-learn style facade: fit on point clouds + boxes, predict object centers."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .block import backbone_vjp
from .config import load_config
from .harness import head as H
from .harness.scene import SyntheticScene
from .harness.train import Batcher, forward_loss, train
from .validation import check_point_clouds, check_targets
from .voxelgrid import concat_voxel_sets, voxelize


class LionDetector(BaseEstimator):
    """Backbone plus center-heatmap head trained end to end.

    ``X`` is a sequence of (N, 4) point clouds, ``y`` a matching sequence of
    (n, 7) box arrays (cx, cy, cz, l, w, h, yaw).
    """

    def __init__(self, config="toy", operator="mamba", steps=500, lr=3e-3, batch_size=8, score_threshold=0.3, seed=0):
        self.config = config
        self.operator = operator
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.score_threshold = score_threshold
        self.seed = seed

    def _run_config(self):
        return load_config(self.config).with_overrides(operator=self.operator, seed=self.seed)

    def fit(self, X, y):
        clouds = check_point_clouds(X)
        boxes = check_targets(y, len(clouds))
        rc = self._run_config()
        scenes = [SyntheticScene(p, b, np.zeros(len(b), np.int64)) for p, b in zip(clouds, boxes)]
        tc = replace(rc.train, steps=self.steps, lr=self.lr, batch_size=self.batch_size)
        res = train(tc, scenes=scenes)
        self.backbone_config_ = rc.backbone
        self.params_ = res.params
        self.trace_ = res.trace
        self.n_features_in_ = 4
        return self

    def _voxel_batch(self, X):
        clouds = check_point_clouds(X)
        grid = self.backbone_config_.grid
        return concat_voxel_sets([voxelize(p, grid, self.backbone_config_.init_dim) for p in clouds]), len(clouds)

    def transform(self, X):
        """Per-scene mean of the final backbone features, (n_scenes, C)."""
        check_is_fitted(self, "params_")
        vs, n = self._voxel_batch(X)
        out, _, _ = backbone_vjp(vs, self.params_.backbone, self.backbone_config_)
        sums = np.zeros((n, out.channels))
        np.add.at(sums, out.batch, out.feats)
        counts = np.bincount(out.batch, minlength=n)[:, None]
        return sums / np.maximum(counts, 1)

    def _head_out(self, X):
        vs, n = self._voxel_batch(X)
        out, _, _ = backbone_vjp(vs, self.params_.backbone, self.backbone_config_)
        bev, _ = H.bev_vjp(out, n)
        return H.head_forward(bev, self.params_.head)

    def predict(self, X):
        """Detected centers per scene as (k, 3) arrays of world x, y and score."""
        check_is_fitted(self, "params_")
        dets = H.decode_peaks(self._head_out(X), score_threshold=self.score_threshold)
        g = self.backbone_config_.grid
        out = []
        for scene in dets:
            arr = np.array([(g.range_min[0] + (ix + 0.5) * g.voxel_size[0], g.range_min[1] + (iy + 0.5) * g.voxel_size[1], s) for _, ix, iy, s in scene])
            out.append(arr.reshape(-1, 3))
        return out

    def score(self, X, y):
        """Center recall within one BEV cell."""
        check_is_fitted(self, "params_")
        clouds = check_point_clouds(X)
        boxes = check_targets(y, len(clouds))
        scenes = [SyntheticScene(p, b, np.zeros(len(b), np.int64)) for p, b in zip(clouds, boxes)]
        batcher = Batcher(scenes, self.backbone_config_)
        vs, targets, n = batcher.batch(range(len(scenes)))
        _, _, dets = forward_loss(self.params_, self.backbone_config_, vs, targets, n, need_grad=False)
        return H.center_recall(dets, targets)
