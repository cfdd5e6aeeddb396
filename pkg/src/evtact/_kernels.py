"""Hot loops for DSI voting and depth extraction.

Numba-compiled when available; each kernel has a pure-numpy twin used as a
fallback and for bit-identity tests. Set ``EVTACT_NO_NUMBA=1`` to force the
numpy path.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("EVTACT_NO_NUMBA", "") not in ("1", "true", "yes")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if not USE_NUMBA:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True, nogil=True)
def _vote(u0, u1, v0, v1, oz, dz, planes, counts, j_lo, j_hi, width, height, bounds):
    n = u0.shape[0]
    for j in range(j_lo, j_hi):
        z = planes[j]
        invz = 1.0 / z
        for k in range(n):
            dzk = dz[k]
            if dzk > 0.0:
                if z <= oz[k]:
                    continue
            elif dzk < 0.0:
                if z >= oz[k]:
                    continue
            else:
                continue
            u = u0[k] + u1[k] * invz
            v = v0[k] + v1[k] * invz
            ui = int(np.floor(u + 0.5))
            vi = int(np.floor(v + 0.5))
            if 0 <= ui < width and 0 <= vi < height:
                counts[j, vi, ui] += 1
                if ui < bounds[0]:
                    bounds[0] = ui
                if ui > bounds[1]:
                    bounds[1] = ui
                if vi < bounds[2]:
                    bounds[2] = vi
                if vi > bounds[3]:
                    bounds[3] = vi


def _vote_numpy(u0, u1, v0, v1, oz, dz, planes, counts, j_lo, j_hi, width, height, bounds):
    for j in range(j_lo, j_hi):
        z = planes[j]
        invz = 1.0 / z
        s_ok = np.where(dz > 0, z > oz, np.where(dz < 0, z < oz, False))
        u = u0 + u1 * invz
        v = v0 + v1 * invz
        ui = np.floor(u + 0.5).astype(np.int64)
        vi = np.floor(v + 0.5).astype(np.int64)
        ok = s_ok & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
        if not ok.any():
            continue
        flat = vi[ok] * width + ui[ok]
        counts[j] += np.bincount(flat, minlength=width * height).reshape(height, width).astype(np.int32)
        bounds[0] = min(bounds[0], int(ui[ok].min()))
        bounds[1] = max(bounds[1], int(ui[ok].max()))
        bounds[2] = min(bounds[2], int(vi[ok].min()))
        bounds[3] = max(bounds[3], int(vi[ok].max()))


@njit(cache=True, nogil=True)
def _argmax_counts(counts, best_idx, best_cnt):
    n_z, h, w = counts.shape
    for y in range(h):
        for x in range(w):
            best_idx[y, x] = 0
            best_cnt[y, x] = counts[0, y, x]
    for j in range(1, n_z):
        for y in range(h):
            for x in range(w):
                c = counts[j, y, x]
                if c > best_cnt[y, x]:
                    best_cnt[y, x] = c
                    best_idx[y, x] = j


def _argmax_counts_numpy(counts, best_idx, best_cnt):
    # np.argmax keeps the first (nearest-depth) plane on ties
    best_idx[:] = np.argmax(counts, axis=0)
    best_cnt[:] = np.max(counts, axis=0)


@njit(cache=True, nogil=True)
def _masked_median(idx, valid, ksize, n_bins, out):
    h, w = idx.shape
    r = ksize // 2
    hist = np.zeros(n_bins, dtype=np.int64)
    for y in range(h):
        hist[:] = 0
        cnt = 0
        y0 = y - r if y - r > 0 else 0
        y1 = y + r + 1 if y + r + 1 < h else h
        x_init = r + 1 if r + 1 < w else w
        for xx in range(x_init):
            for yy in range(y0, y1):
                if valid[yy, xx]:
                    hist[idx[yy, xx]] += 1
                    cnt += 1
        for x in range(w):
            if valid[y, x] and cnt > 0:
                target = (cnt + 1) // 2
                csum = 0
                for b in range(n_bins):
                    csum += hist[b]
                    if csum >= target:
                        out[y, x] = b
                        break
            xa = x + r + 1
            if xa < w:
                for yy in range(y0, y1):
                    if valid[yy, xa]:
                        hist[idx[yy, xa]] += 1
                        cnt += 1
            xr = x - r
            if xr >= 0:
                for yy in range(y0, y1):
                    if valid[yy, xr]:
                        hist[idx[yy, xr]] -= 1
                        cnt -= 1


def _masked_median_numpy(idx, valid, ksize, n_bins, out):
    h, w = idx.shape
    r = ksize // 2
    ys, xs = np.nonzero(valid)
    for y, x in zip(ys, xs):
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        vals = idx[y0:y1, x0:x1][valid[y0:y1, x0:x1]]
        vals.sort()
        out[y, x] = vals[(vals.size + 1) // 2 - 1]


def vote_kernel():
    return _vote if USE_NUMBA else _vote_numpy


def argmax_kernel():
    return _argmax_counts if USE_NUMBA else _argmax_counts_numpy


def masked_median_kernel():
    return _masked_median if USE_NUMBA else _masked_median_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
