"""Brute-force reference implementations.

These are deliberately naive (scalar loops, a different polygon test) and
serve as independent oracles for the vectorised code in the self-test and
the test suite.
"""

from __future__ import annotations

import math

import numpy as np
import shapely


def bce_scalar(x: float, y: float) -> float:
    # log(1 + e^-|x|) form keeps extreme logits finite
    return max(x, 0.0) - x * y + math.log1p(math.exp(-abs(x)))


def weighted_bce_reference(logits, target, class_weights) -> float:
    """Weighted BCE over one (C, H, W) instance by explicit loops."""
    total = 0.0
    for c, w in enumerate(class_weights):
        acc, n = 0.0, 0
        for row_l, row_t in zip(logits[c], target[c]):
            for x, y in zip(row_l, row_t):
                acc += bce_scalar(float(x), float(y))
                n += 1
        total += w * acc / n
    return total


def cycle_reference(pv_gt, pv_logits, class_weights) -> float:
    """(N, C, H, W) maps: plain average of the per-camera reference BCE."""
    vals = [weighted_bce_reference(pv_logits[i], pv_gt[i], class_weights) for i in range(len(pv_gt))]
    return sum(vals) / len(vals)


def height_reference(h_gt, h_pred) -> float:
    a, b = np.asarray(h_gt, dtype=float), np.asarray(h_pred, dtype=float)
    acc, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        acc += (x - y) ** 2
        n += 1
    return acc / n


def smooth_l1_reference(a, b) -> float:
    acc, n = 0.0, 0
    for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
        d = abs(x - y)
        acc += 0.5 * d * d if d < 1.0 else d - 0.5
        n += 1
    return acc / n


def l1_reference(a, b) -> float:
    vals = [abs(x - y) for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist())]
    return sum(vals) / len(vals)


def iou_reference(pred, gt, threshold: float = 0.5) -> list[float]:
    """Per-class IoU by counting cells one at a time; classes on axis 0."""
    out = []
    for c in range(len(pred)):
        inter = union = 0
        for p, g in zip(np.ravel(pred[c]).tolist(), np.ravel(gt[c]).tolist()):
            pb, gb = p > threshold, g > 0.5
            inter += pb and gb
            union += pb or gb
        out.append(1.0 if union == 0 else inter / union)
    return out


def rasterize_reference(scene, spec) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell containment test with shapely predicates."""
    from .scene_synth import CLASSES, HEIGHT_NORM

    xs = -spec.extent_x / 2.0 + (np.arange(spec.nx) + 0.5) * spec.extent_x / spec.nx
    ys = -spec.extent_y / 2.0 + (np.arange(spec.ny) + 0.5) * spec.extent_y / spec.ny
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    bev = np.zeros((spec.nx, spec.ny, 3), dtype=np.uint8)
    height = np.zeros((spec.nx, spec.ny, 1), dtype=np.float32)
    for poly in scene.road:
        bev[..., 0] |= shapely.contains_xy(shapely.Polygon(poly), gx, gy).astype(np.uint8)
    for obj in scene.objects:
        m = shapely.contains_xy(shapely.Polygon(obj.corners()), gx, gy)
        bev[m, CLASSES.index(obj.cls)] = 1
        height[m, 0] = min(obj.height / HEIGHT_NORM, 1.0)
    return bev, height


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64), element by element."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(x)
        flat[k] = orig - step
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
