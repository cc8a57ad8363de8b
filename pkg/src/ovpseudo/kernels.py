"""Hot numeric kernels, each with a numba path and a numpy path.

Both paths accumulate in the same order so their results are bit-identical;
``tests/test_kernels.py`` holds them to that. The public functions dispatch
on :func:`ovpseudo._accel.numba_enabled`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, numba_enabled

# ---------------------------------------------------------------------------
# reflect-101 separable convolution


def reflect101_indices(n: int, radius: int) -> np.ndarray:
    """Source column for each padded position ``-radius .. n-1+radius``."""
    pos = np.arange(-radius, n + radius, dtype=np.int64)
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * (n - 1)
    j = np.mod(pos, period)
    return np.where(j >= n, period - j, j)


@njit
def _reflect101(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = i % period
    if j < 0:
        j += period
    if j >= n:
        j = period - j
    return j


@njit
def _convolve_rows_nb(src, kernel):
    rows, n = src.shape
    klen = kernel.shape[0]
    radius = klen // 2
    idx = np.empty(n + 2 * radius, np.int64)
    for p in range(n + 2 * radius):
        idx[p] = _reflect101(p - radius, n)
    out = np.zeros((rows, n), np.float64)
    for i in range(rows):
        for j in range(n):
            acc = 0.0
            for k in range(klen):
                acc += kernel[k] * src[i, idx[j + k]]
            out[i, j] = acc
    return out


def _convolve_rows_np(src, kernel):
    rows, n = src.shape
    klen = kernel.shape[0]
    padded = src[:, reflect101_indices(n, klen // 2)]
    acc = np.zeros((rows, n), np.float64)
    # tap-by-tap accumulation keeps the summation order of the loop version
    for k in range(klen):
        acc += kernel[k] * padded[:, k:k + n]
    return acc


def convolve_rows(src: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every row of a 2-D float64 array with ``kernel`` (odd length)."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if numba_enabled():
        return _convolve_rows_nb(src, kernel)
    return _convolve_rows_np(src, kernel)


# ---------------------------------------------------------------------------
# pairwise mask intersections


@njit
def _mask_intersections_nb(flat):
    n, p = flat.shape
    out = np.zeros((n, n), np.int64)
    for a in range(n):
        for b in range(a, n):
            c = 0
            for k in range(p):
                if flat[a, k] and flat[b, k]:
                    c += 1
            out[a, b] = c
            out[b, a] = c
    return out


def _mask_intersections_np(flat):
    m = flat.astype(np.float64)
    return np.rint(m @ m.T).astype(np.int64)


def mask_intersections(flat: np.ndarray) -> np.ndarray:
    """Intersection pixel counts for every pair of rows of a boolean (n, P) array."""
    flat = np.ascontiguousarray(flat, dtype=np.bool_)
    if flat.shape[0] == 0:
        return np.zeros((0, 0), np.int64)
    if numba_enabled():
        return _mask_intersections_nb(flat)
    return _mask_intersections_np(flat)


# ---------------------------------------------------------------------------
# union coverage on a compressed grid


@njit
def _cover_cells_nb(ix0, ix1, iy0, iy1, nx, ny):
    covered = np.zeros((nx, ny), np.bool_)
    for b in range(ix0.shape[0]):
        for i in range(ix0[b], ix1[b]):
            for j in range(iy0[b], iy1[b]):
                covered[i, j] = True
    return covered


def _cover_cells_np(ix0, ix1, iy0, iy1, nx, ny):
    diff = np.zeros((nx + 1, ny + 1), np.int64)
    np.add.at(diff, (ix0, iy0), 1)
    np.add.at(diff, (ix1, iy0), -1)
    np.add.at(diff, (ix0, iy1), -1)
    np.add.at(diff, (ix1, iy1), 1)
    return np.cumsum(np.cumsum(diff, axis=0), axis=1)[:nx, :ny] > 0


def union_area_in(target: tuple, boxes: np.ndarray) -> float:
    """Area of ``target ∩ union(boxes)``; boxes as (k, 4) corner arrays x0,y0,x1,y1.

    Exact rectangle decomposition: the target is cut along every box edge
    that falls inside it, and each resulting cell is either fully covered or
    fully uncovered.
    """
    tx0, ty0, tx1, ty1 = (float(v) for v in target)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx0 = np.clip(boxes[:, 0], tx0, tx1)
    cy0 = np.clip(boxes[:, 1], ty0, ty1)
    cx1 = np.clip(boxes[:, 2], tx0, tx1)
    cy1 = np.clip(boxes[:, 3], ty0, ty1)
    keep = (cx1 > cx0) & (cy1 > cy0)
    if not keep.any():
        return 0.0
    cx0, cy0, cx1, cy1 = cx0[keep], cy0[keep], cx1[keep], cy1[keep]
    xs = np.unique(np.concatenate(([tx0, tx1], cx0, cx1)))
    ys = np.unique(np.concatenate(([ty0, ty1], cy0, cy1)))
    ix0 = np.searchsorted(xs, cx0).astype(np.int64)
    ix1 = np.searchsorted(xs, cx1).astype(np.int64)
    iy0 = np.searchsorted(ys, cy0).astype(np.int64)
    iy1 = np.searchsorted(ys, cy1).astype(np.int64)
    nx, ny = len(xs) - 1, len(ys) - 1
    if numba_enabled():
        covered = _cover_cells_nb(ix0, ix1, iy0, iy1, nx, ny)
    else:
        covered = _cover_cells_np(ix0, ix1, iy0, iy1, nx, ny)
    cell = np.outer(np.diff(xs), np.diff(ys))
    return float(cell[covered].sum())


# ---------------------------------------------------------------------------
# greedy detection -> ground-truth assignment


@njit
def _greedy_assign_nb(iou, gt_ignore, thr):
    n_det, n_gt = iou.shape
    match = np.full(n_det, -1, np.int64)
    det_ignored = np.zeros(n_det, np.bool_)
    taken = np.zeros(n_gt, np.bool_)
    for d in range(n_det):
        best = -1
        best_iou = -1.0
        for g in range(n_gt):
            if gt_ignore[g] or taken[g]:
                continue
            v = iou[d, g]
            if v >= thr and v > best_iou:
                best = g
                best_iou = v
        if best >= 0:
            taken[best] = True
            match[d] = best
            continue
        for g in range(n_gt):
            if gt_ignore[g] and iou[d, g] >= thr:
                det_ignored[d] = True
                break
    return match, det_ignored


def _greedy_assign_np(iou, gt_ignore, thr):
    n_det, n_gt = iou.shape
    match = np.full(n_det, -1, np.int64)
    det_ignored = np.zeros(n_det, np.bool_)
    available = ~gt_ignore.copy()
    for d in range(n_det):
        row = np.where(available & (iou[d] >= thr), iou[d], -1.0)
        if n_gt and row.max() >= 0.0:
            best = int(np.argmax(row))
            available[best] = False
            match[d] = best
        elif np.any(gt_ignore & (iou[d] >= thr)):
            det_ignored[d] = True
    return match, det_ignored


def greedy_assign(iou: np.ndarray, gt_ignore: np.ndarray, thr: float):
    """Match score-ordered detections (rows) to ground truths (columns).

    Each detection takes the highest-IoU still-free non-ignored GT with
    IoU >= ``thr`` (lowest index on ties). A detection that finds none but
    overlaps an ignored GT by >= ``thr`` is flagged as ignored.

    Returns ``(match, det_ignored)``; ``match[d]`` is a GT index or -1.
    """
    iou = np.ascontiguousarray(iou, dtype=np.float64)
    gt_ignore = np.ascontiguousarray(gt_ignore, dtype=np.bool_)
    if numba_enabled():
        return _greedy_assign_nb(iou, gt_ignore, float(thr))
    return _greedy_assign_np(iou, gt_ignore, float(thr))
