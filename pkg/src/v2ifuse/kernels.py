"""Hot inner loops, each with a numba and a numpy implementation.

The public functions dispatch on :func:`v2ifuse._accel.numba_enabled`; the
``*_numpy`` and ``*_numba`` variants are importable directly for testing and
benchmarking.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit, numba_enabled

_EPS = 1e-12


# ------------------------------------------------------------------ ray casting

def cast_rays_numpy(origins: np.ndarray, dirs: np.ndarray, boxes: np.ndarray, max_range: float):
    """First hit of each ray against axis-aligned boxes.

    origins, dirs: (R, 3); boxes: (B, 6) as (x0, y0, z0, x1, y1, z1).
    Returns (t, box_index) with t = inf and index -1 where nothing is hit
    within ``max_range``.  Rays starting inside a box do not hit it.
    """
    R = len(dirs)
    if len(boxes) == 0 or R == 0:
        return np.full(R, np.inf), np.full(R, -1, dtype=np.int64)
    o = origins[:, None, :]
    d = dirs[:, None, :]
    lo = boxes[None, :, :3]
    hi = boxes[None, :, 3:]
    flat = np.abs(d) < _EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tn = np.where(flat, -np.inf, np.minimum(t1, t2))
    tf = np.where(flat, np.inf, np.maximum(t1, t2))
    outside = flat & ((o < lo) | (o > hi))
    tmin = tn.max(axis=2)
    tmax = tf.min(axis=2)
    hit = (tmax >= tmin) & (tmin > _EPS) & (tmin <= max_range) & ~outside.any(axis=2)
    tmin = np.where(hit, tmin, np.inf)
    idx = tmin.argmin(axis=1)
    t = tmin[np.arange(R), idx]
    idx = np.where(np.isfinite(t), idx, -1)
    return t, idx


@njit
def cast_rays_numba(origins, dirs, boxes, max_range):
    R = dirs.shape[0]
    B = boxes.shape[0]
    t_out = np.full(R, np.inf)
    i_out = np.full(R, -1, dtype=np.int64)
    for r in range(R):
        best = np.inf
        besti = -1
        for b in range(B):
            tmin = -np.inf
            tmax = np.inf
            miss = False
            for a in range(3):
                o = origins[r, a]
                d = dirs[r, a]
                lo = boxes[b, a]
                hi = boxes[b, a + 3]
                if abs(d) < 1e-12:
                    if o < lo or o > hi:
                        miss = True
                        break
                else:
                    t1 = (lo - o) / d
                    t2 = (hi - o) / d
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
            if miss or tmax < tmin or tmin <= 1e-12 or tmin > max_range:
                continue
            if tmin < best:
                best = tmin
                besti = b
        t_out[r] = best
        i_out[r] = besti
    return t_out, i_out


def cast_rays(origins, dirs, boxes, max_range: float = np.inf):
    origins = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.ascontiguousarray(np.reshape(boxes, (-1, 6)), dtype=np.float64)
    if numba_enabled():
        return cast_rays_numba(origins, dirs, boxes, float(max_range))
    return cast_rays_numpy(origins, dirs, boxes, float(max_range))


# --------------------------------------------------------------- box overlap

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes (x0, y0, x1, y1)."""
    a = np.reshape(a, (-1, 4))
    b = np.reshape(b, (-1, 4))
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_numpy(corners: np.ndarray, order: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression in the given ``order``; returns kept indices."""
    keep = []
    alive = np.ones(len(order), dtype=bool)
    boxes = corners[order]
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        if i + 1 < len(order):
            ious = iou_matrix(boxes[i], boxes[i + 1:])[0]
            alive[i + 1:] &= ious < iou_threshold
    return np.asarray(keep, dtype=np.int64)


@njit
def nms_numba(corners, order, iou_threshold):
    n = order.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if not alive[i]:
            continue
        a = corners[order[i]]
        keep[k] = order[i]
        k += 1
        area_a = (a[2] - a[0]) * (a[3] - a[1])
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            b = corners[order[j]]
            ix = min(a[2], b[2]) - max(a[0], b[0])
            iy = min(a[3], b[3]) - max(a[1], b[1])
            if ix <= 0.0 or iy <= 0.0:
                continue
            inter = ix * iy
            union = area_a + (b[2] - b[0]) * (b[3] - b[1]) - inter
            if union > 0.0 and inter / union >= iou_threshold:
                alive[j] = False
    return keep[:k]


def nms(corners: np.ndarray, order: np.ndarray, iou_threshold: float) -> np.ndarray:
    corners = np.ascontiguousarray(corners, dtype=np.float64).reshape(-1, 4)
    order = np.ascontiguousarray(order, dtype=np.int64)
    if numba_enabled():
        return nms_numba(corners, order, float(iou_threshold))
    return nms_numpy(corners, order, iou_threshold)


# ---------------------------------------------------------- neighbor difference

def neighbor_difference_numpy(v: np.ndarray) -> np.ndarray:
    """Mean absolute difference to the 4-neighbors, missing neighbors read as 0.

    A 1x1 map has no neighbors and returns its own value.
    """
    h, w = v.shape
    if h == 1 and w == 1:
        return v.copy()
    p = np.pad(v, 1)
    c = p[1:-1, 1:-1]
    top = np.abs(c - p[:-2, 1:-1])
    bottom = np.abs(c - p[2:, 1:-1])
    left = np.abs(c - p[1:-1, :-2])
    right = np.abs(c - p[1:-1, 2:])
    return (top + bottom + left + right) / 4.0


@njit
def neighbor_difference_numba(v):
    h, w = v.shape
    out = np.empty((h, w))
    if h == 1 and w == 1:
        out[0, 0] = v[0, 0]
        return out
    for i in range(h):
        for j in range(w):
            c = v[i, j]
            t = v[i - 1, j] if i > 0 else 0.0
            b = v[i + 1, j] if i < h - 1 else 0.0
            l = v[i, j - 1] if j > 0 else 0.0
            r = v[i, j + 1] if j < w - 1 else 0.0
            out[i, j] = (abs(c - t) + abs(c - b) + abs(c - l) + abs(c - r)) / 4.0
    return out


def neighbor_difference(v: np.ndarray) -> np.ndarray:
    v = np.ascontiguousarray(v, dtype=np.float64)
    if numba_enabled():
        return neighbor_difference_numba(v)
    return neighbor_difference_numpy(v)
