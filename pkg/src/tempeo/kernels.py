"""Hot inner loops: polygon scan fill and pixel confusion counting.

Every kernel exists twice, a numba version (``*_nb``) and a vectorised numpy
version (``*_np``).  The public name is bound to one of them at import time
according to :data:`tempeo._accel.USE_NUMBA`.  Both paths must produce
identical bytes; the test-suite runs them side by side.

Polygons are passed as flat coordinate arrays plus ring offsets: ring ``r``
occupies ``xs[starts[r]:starts[r + 1]]`` and is stored *open* (the closing
vertex is implied).  A pixel ``(row, col)`` is filled iff its centre
``(col + 0.5, row + 0.5)`` is inside under the even-odd rule, where an edge
counts as a crossing when ``(y1 > yc) != (y2 > yc)`` and the centre lies
strictly left of the intersection abscissa.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

# cap on the edges x rows x cols boolean block in the numpy fill
_NP_BLOCK = 1 << 22


@njit(cache=True)
def _first_col_nb(x):
    # smallest integer c with c + 0.5 >= x
    c = math.ceil(x - 0.5)
    while c + 0.5 < x:
        c += 1
    while (c - 1) + 0.5 >= x:
        c -= 1
    return c


@njit(cache=True)
def fill_polygon_nb(labels, xs, ys, starts, label):
    h, w = labels.shape
    n = xs.shape[0]
    if n < 3:
        return
    ymin = ys.min()
    ymax = ys.max()
    row0 = max(0, int(math.floor(ymin - 0.5)))
    row1 = min(h, int(math.ceil(ymax - 0.5)) + 1)
    buf = np.empty(n, np.float64)
    nrings = starts.shape[0] - 1
    for j in range(row0, row1):
        yc = j + 0.5
        m = 0
        for r in range(nrings):
            s = starts[r]
            e = starts[r + 1]
            for i in range(s, e):
                k = i + 1
                if k == e:
                    k = s
                y1 = ys[i]
                y2 = ys[k]
                if (y1 > yc) != (y2 > yc):
                    x1 = xs[i]
                    x2 = xs[k]
                    buf[m] = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
                    m += 1
        if m < 2:
            continue
        xb = np.sort(buf[:m])
        for p in range(0, m - 1, 2):
            c0 = max(_first_col_nb(xb[p]), 0)
            c1 = min(_first_col_nb(xb[p + 1]), w)
            for c in range(c0, c1):
                labels[j, c] = label


def _edges(xs, ys, starts):
    nxt = np.arange(1, xs.shape[0] + 1)
    for r in range(starts.shape[0] - 1):
        nxt[starts[r + 1] - 1] = starts[r]
    return xs, ys, xs[nxt], ys[nxt]


def fill_polygon_np(labels, xs, ys, starts, label):
    h, w = labels.shape
    if xs.shape[0] < 3:
        return
    x1, y1, x2, y2 = _edges(xs, ys, starts)
    row0 = max(0, int(math.floor(ys.min() - 0.5)))
    row1 = min(h, int(math.ceil(ys.max() - 0.5)) + 1)
    col0 = max(0, int(math.floor(xs.min() - 0.5)))
    col1 = min(w, int(math.ceil(xs.max() - 0.5)) + 1)
    if row0 >= row1 or col0 >= col1:
        return
    xc = np.arange(col0, col1) + 0.5
    n_edges = x1.shape[0]
    step = max(1, _NP_BLOCK // max(1, n_edges * (col1 - col0)))
    dx = (x2 - x1)[:, None]
    dy = (y2 - y1)[:, None]
    for r0 in range(row0, row1, step):
        r1 = min(row1, r0 + step)
        yc = np.arange(r0, r1) + 0.5
        cross = (y1[:, None] > yc) != (y2[:, None] > yc)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1[:, None] + (yc - y1[:, None]) * dx / dy
        hits = cross[:, :, None] & (xc[None, None, :] < xi[:, :, None])
        inside = (np.count_nonzero(hits, axis=0) & 1).astype(bool)
        block = labels[r0:r1, col0:col1]
        block[inside] = label


@njit(cache=True)
def confusion_nb(pred, gt, k):
    cm = np.zeros((k, k), np.int64)
    p = pred.ravel()
    g = gt.ravel()
    for i in range(p.shape[0]):
        cm[g[i], p[i]] += 1
    return cm


def confusion_np(pred, gt, k):
    idx = gt.ravel().astype(np.int64) * k + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=k * k).reshape(k, k)


@njit(cache=True)
def binary_counts_nb(pred, gt):
    p = pred.ravel()
    g = gt.ravel()
    tp = 0
    fp = 0
    fn = 0
    for i in range(p.shape[0]):
        a = p[i] != 0
        b = g[i] != 0
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
    return tp, fp, fn


def binary_counts_np(pred, gt):
    p = pred != 0
    g = gt != 0
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


if USE_NUMBA:
    fill_polygon = fill_polygon_nb
    confusion = confusion_nb
    binary_counts = binary_counts_nb
else:
    fill_polygon = fill_polygon_np
    confusion = confusion_np
    binary_counts = binary_counts_np


def fill_box(labels, x_min, y_min, x_max, y_max, label):
    """Half-open box fill, clipped to the array. Identical on both backends."""
    h, w = labels.shape
    x0, x1 = max(0, x_min), min(w, x_max)
    y0, y1 = max(0, y_min), min(h, y_max)
    if x0 < x1 and y0 < y1:
        labels[y0:y1, x0:x1] = label
