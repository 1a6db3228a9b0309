"""Input checks shared by the estimator facade."""
import numpy as np
from sklearn.utils.validation import check_array

from .errors import ContractViolation


def check_point_cloud(points, where="validation.check_point_cloud") -> np.ndarray:
    """(N, 4) float64 array of x, y, z, intensity; N may be zero."""
    try:
        arr = check_array(points, dtype=np.float64, ensure_min_samples=0, ensure_all_finite=True)
    except ValueError as exc:
        raise ContractViolation(where, str(exc)) from exc
    if arr.shape[1] != 4:
        raise ContractViolation(where, f"expected 4 columns (x, y, z, intensity), got {arr.shape[1]}")
    return arr


def check_point_clouds(X, where="validation.check_point_clouds") -> list:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    clouds = [check_point_cloud(x, where) for x in X]
    if not clouds:
        raise ContractViolation(where, "need at least one point cloud")
    return clouds


def check_boxes(boxes, where="validation.check_boxes") -> np.ndarray:
    """(n, 7) boxes: cx, cy, cz, l, w, h, yaw with positive sizes."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 7) if np.size(boxes) else np.zeros((0, 7))
    if not np.isfinite(arr).all():
        raise ContractViolation(where, "boxes must be finite")
    if (arr[:, 3:6] <= 0).any():
        raise ContractViolation(where, "box sizes must be positive")
    return arr


def check_targets(y, n, where="validation.check_targets") -> list:
    if y is None:
        raise ContractViolation(where, "ground-truth boxes are required")
    y = [check_boxes(b, where) for b in y]
    if len(y) != n:
        raise ContractViolation(where, f"{n} point clouds but {len(y)} box sets")
    return y
