"""Compiled kernels for log-domain scaling on point clouds.

Costs are Euclidean distances computed on the fly; nothing of size
``n_a * n_b`` is ever allocated.  Points of the summed-over side are
bucketed into a uniform grid of square bins, visited in rings of growing
Chebyshev radius around the query point.  A bin is skipped, and the ring
walk stops, once an upper bound on every remaining term sits more than
``CUT`` nats below the running maximum, so every dropped term is below
``exp(-CUT)`` relative to the result.

Rows are processed in parallel, but each row reduces over bins and atoms in
a fixed order, so results do not depend on the thread count.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numba
import numpy as np
from numba import njit, prange

# TBB is often present but too old; pick a layer that never warns.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

CUT = 40.0  # exp(-40) ~ 4e-18


class Bins(NamedTuple):
    origin: np.ndarray  # (2,) lower-left corner of bin (0, 0)
    h: float
    nbx: int
    nby: int
    ptr: np.ndarray  # (nbx * nby + 1,) CSR offsets, row-major over (iy, ix)
    order: np.ndarray  # point indices grouped by bin


def make_bins(pts: np.ndarray, h: float) -> Bins:
    """Bucket points into square bins of width ``h`` (km)."""
    pts = np.asarray(pts, dtype=np.float64)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    h = float(max(h, 1e-9, float(span.max()) / 2048.0))
    nbx = int(span[0] // h) + 1
    nby = int(span[1] // h) + 1
    ix = np.minimum(((pts[:, 0] - lo[0]) // h).astype(np.int64), nbx - 1)
    iy = np.minimum(((pts[:, 1] - lo[1]) // h).astype(np.int64), nby - 1)
    key = iy * nbx + ix
    order = np.argsort(key, kind="stable").astype(np.int64)
    ptr = np.zeros(nbx * nby + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(key, minlength=nbx * nby))
    return Bins(lo.astype(np.float64), h, nbx, nby, ptr, order)


def bin_width(eps: float, pts: np.ndarray) -> float:
    """Bin width suited to kernel scale ``eps``: a few bins per cut radius,
    but not so small that bins are mostly empty."""
    span = np.ptp(pts, axis=0)
    spacing = math.sqrt(max(span[0] * span[1], 1e-18) / max(pts.shape[0], 1))
    return max(CUT * eps / 4.0, 2.0 * spacing)


@njit(cache=True)
def _bin_max(w, ptr, order):
    nb = ptr.shape[0] - 1
    out = np.full(nb, -np.inf)
    for b in range(nb):
        for k in range(ptr[b], ptr[b + 1]):
            v = w[order[k]]
            if v > out[b]:
                out[b] = v
    return out


@njit(cache=True, inline="always")
def _rect_dist(x, y, x0, y0, h):
    dx = max(x0 - x, 0.0, x - (x0 + h))
    dy = max(y0 - y, 0.0, y - (y0 + h))
    return math.sqrt(dx * dx + dy * dy)


@njit(cache=True)
def _row_lse(xi, yi, Y, w, eps, ox, oy, h, nbx, nby, ptr, order, wmax, wtop):
    """Online log-sum-exp of ``w[j] - |x - Y_j| / eps`` over the ring walk."""
    cx = int(math.floor((xi - ox) / h))
    cy = int(math.floor((yi - oy) / h))
    # rings needed to reach the nearest bin at all
    r0 = max(0, -cx, cx - (nbx - 1), -cy, cy - (nby - 1))
    rmax = max(cx, nbx - 1 - cx, cy, nby - 1 - cy, r0)
    m = -np.inf
    s = 0.0
    for r in range(r0, rmax + 1):
        if r >= 1 and m > -np.inf and wtop - (r - 1) * h / eps < m - CUT:
            break
        for by in range(cy - r, cy + r + 1):
            if by < 0 or by >= nby:
                continue
            edge = by == cy - r or by == cy + r
            step = 1 if edge else 2 * r
            bx = cx - r
            while bx <= cx + r:
                if 0 <= bx < nbx:
                    b = by * nbx + bx
                    if ptr[b + 1] > ptr[b]:
                        bound = wmax[b] - _rect_dist(xi, yi, ox + bx * h, oy + by * h, h) / eps
                        if bound >= m - CUT:
                            for k in range(ptr[b], ptr[b + 1]):
                                j = order[k]
                                dx = xi - Y[j, 0]
                                dy = yi - Y[j, 1]
                                t = w[j] - math.sqrt(dx * dx + dy * dy) / eps
                                if t > m:
                                    s = s * math.exp(m - t) + 1.0
                                    m = t
                                else:
                                    s += math.exp(t - m)
                if r == 0:
                    break
                bx += step
    return m + math.log(s)


@njit(cache=True, parallel=True)
def _lse_rows(X, Y, w, eps, ox, oy, h, nbx, nby, ptr, order):
    wmax = _bin_max(w, ptr, order)
    wtop = w.max()
    out = np.empty(X.shape[0], dtype=np.float64)
    for i in prange(X.shape[0]):
        out[i] = _row_lse(X[i, 0], X[i, 1], Y, w, eps, ox, oy, h, nbx, nby, ptr, order,
                          wmax, wtop)
    return out


def lse_rows(X, Y, w, eps, bins: Bins) -> np.ndarray:
    """``out[i] = log sum_j exp(w[j] - |X_i - Y_j| / eps)`` (``bins`` over Y)."""
    return _lse_rows(X, Y, w, eps, bins.origin[0], bins.origin[1], bins.h, bins.nbx,
                     bins.nby, bins.ptr, bins.order)


@njit(cache=True)
def _plan_row(xi, yi, u, Y, w, eps, ox, oy, h, nbx, nby, ptr, order, wmax, log_thr,
              buf_j, buf_m):
    cnt = 0
    for by in range(nby):
        for bx in range(nbx):
            b = by * nbx + bx
            if ptr[b + 1] == ptr[b]:
                continue
            if u + wmax[b] - _rect_dist(xi, yi, ox + bx * h, oy + by * h, h) / eps < log_thr:
                continue
            for k in range(ptr[b], ptr[b + 1]):
                j = order[k]
                dx = xi - Y[j, 0]
                dy = yi - Y[j, 1]
                t = u + w[j] - math.sqrt(dx * dx + dy * dy) / eps
                if t >= log_thr:
                    if buf_j.shape[0] > 0:
                        buf_j[cnt] = j
                        buf_m[cnt] = math.exp(t)
                    cnt += 1
    return cnt


@njit(cache=True)
def _plan_entries(X, Y, u, w, eps, ox, oy, h, nbx, nby, ptr, order, log_thr):
    na = X.shape[0]
    wmax = _bin_max(w, ptr, order)
    empty_j = np.empty(0, dtype=np.int64)
    empty_m = np.empty(0, dtype=np.float64)
    counts = np.zeros(na, dtype=np.int64)
    for i in range(na):
        counts[i] = _plan_row(X[i, 0], X[i, 1], u[i], Y, w, eps, ox, oy, h, nbx, nby, ptr,
                              order, wmax, log_thr, empty_j, empty_m)
    total = counts.sum()
    rows = np.empty(total, dtype=np.int64)
    cols = np.empty(total, dtype=np.int64)
    mass = np.empty(total, dtype=np.float64)
    pos = 0
    for i in range(na):
        c = counts[i]
        if c == 0:
            continue
        bj = np.empty(c, dtype=np.int64)
        bm = np.empty(c, dtype=np.float64)
        _plan_row(X[i, 0], X[i, 1], u[i], Y, w, eps, ox, oy, h, nbx, nby, ptr, order,
                  wmax, log_thr, bj, bm)
        srt = np.argsort(bj)
        for k in range(c):
            rows[pos] = i
            cols[pos] = bj[srt[k]]
            mass[pos] = bm[srt[k]]
            pos += 1
    return rows, cols, mass


def plan_entries(X, Y, u, w, eps, bins: Bins, log_thr: float):
    """Entries ``exp(u[i] + w[j] - c_ij / eps)`` at or above ``exp(log_thr)``.

    Returns (rows, cols, mass) in row-major order with columns ascending.
    """
    return _plan_entries(X, Y, u, w, eps, bins.origin[0], bins.origin[1], bins.h, bins.nbx,
                         bins.nby, bins.ptr, bins.order, log_thr)
