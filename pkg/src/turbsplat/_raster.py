"""Tile-based splatting kernels (numba).

Gaussians are composited front-to-back in list order. Work is split over
16x16 pixel tiles; every Gaussian is binned to each tile its 3-sigma
bounding box overlaps. Each pixel belongs to exactly one tile and sees its
Gaussians in ascending list order, so the result is bit-identical for any
thread count. Backward gradients are written to per-(tile, Gaussian) entry
slots and reduced afterwards in fixed order, which keeps the backward pass
deterministic as well.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

TILE = 16
# alpha ceiling keeps 1/(1 - alpha) bounded in the backward pass
ALPHA_MAX = 0.9999


@njit(cache=True)
def _fill_entries(tx0, tx1, ty0, ty1, offsets, tile_ids, gauss_ids, tiles_x):
    for g in range(tx0.shape[0]):
        o = offsets[g]
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                tile_ids[o] = ty * tiles_x + tx
                gauss_ids[o] = g
                o += 1


def bin_gaussians(bboxes: np.ndarray, width: int, height: int):
    """CSR tile lists: (entry_gauss sorted by (tile, gauss), tile_start, tile_end)."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y

    valid = (bboxes[:, 0] <= bboxes[:, 1]) & (bboxes[:, 2] <= bboxes[:, 3])
    tx0 = np.where(valid, bboxes[:, 0] // TILE, 0)
    tx1 = np.where(valid, bboxes[:, 1] // TILE, -1)
    ty0 = np.where(valid, bboxes[:, 2] // TILE, 0)
    ty1 = np.where(valid, bboxes[:, 3] // TILE, -1)
    counts = np.where(valid, (tx1 - tx0 + 1) * (ty1 - ty0 + 1), 0)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])

    tile_ids = np.empty(total, dtype=np.int64)
    gauss_ids = np.empty(total, dtype=np.int64)
    if total:
        _fill_entries(tx0, tx1, ty0, ty1, offsets[:-1], tile_ids, gauss_ids, tiles_x)
        order = np.lexsort((gauss_ids, tile_ids))
        tile_ids = tile_ids[order]
        gauss_ids = gauss_ids[order]
    tile_start = np.searchsorted(tile_ids, np.arange(n_tiles)).astype(np.int64)
    tile_end = np.searchsorted(tile_ids, np.arange(n_tiles), side="right").astype(np.int64)
    return gauss_ids, tile_start, tile_end, tiles_x


@njit(parallel=True, fastmath=True, cache=True)
def forward(means, icovs, aeff, colors, bboxes, entry_gauss, tile_start, tile_end,
            tiles_x, height, width, out_img, out_trans):
    n_tiles = tile_start.shape[0]
    n_ch = colors.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        py0 = ty * TILE
        px0 = tx * TILE
        th = min(TILE, height - py0)
        tw = min(TILE, width - px0)
        trans = np.ones((th, tw))
        acc = np.zeros((th, tw, n_ch))
        for e in range(tile_start[t], tile_end[t]):
            g = entry_gauss[e]
            mx = means[g, 0]
            my = means[g, 1]
            ia = icovs[g, 0]
            ib = icovs[g, 1]
            ic = icovs[g, 2]
            ae = aeff[g]
            x0 = max(bboxes[g, 0], px0)
            x1 = min(bboxes[g, 1], px0 + tw - 1)
            y0 = max(bboxes[g, 2], py0)
            y1 = min(bboxes[g, 3], py0 + th - 1)
            for py in range(y0, y1 + 1):
                dy = py - my
                ly = py - py0
                for px in range(x0, x1 + 1):
                    dx = px - mx
                    q = 0.5 * (ia * dx * dx + ic * dy * dy) + ib * dx * dy
                    a = ae * math.exp(-q)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    lx = px - px0
                    tv = trans[ly, lx]
                    w = tv * a
                    for ch in range(n_ch):
                        acc[ly, lx, ch] += w * colors[g, ch]
                    trans[ly, lx] = tv * (1.0 - a)
        out_img[py0:py0 + th, px0:px0 + tw, :] = acc
        out_trans[py0:py0 + th, px0:px0 + tw] = trans


@njit(parallel=True, fastmath=True, cache=True)
def backward(means, icovs, aeff, colors, bboxes, entry_gauss, tile_start, tile_end,
             tiles_x, height, width, final_trans, upstream, entry_grads):
    """Reverse-order compositing gradients.

    entry_grads rows are [d_mx, d_my, d_A, d_B, d_C, d_aeff, d_color...] for
    the (tile, Gaussian) entry at the same index; (A, B, C) parameterize the
    composited covariance [[A, B], [B, C]].
    """
    n_tiles = tile_start.shape[0]
    n_ch = colors.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        py0 = ty * TILE
        px0 = tx * TILE
        th = min(TILE, height - py0)
        tw = min(TILE, width - px0)
        trans = np.empty((th, tw))
        suffix = np.zeros((th, tw, n_ch))
        for ly in range(th):
            for lx in range(tw):
                trans[ly, lx] = final_trans[py0 + ly, px0 + lx]
        for e in range(tile_end[t] - 1, tile_start[t] - 1, -1):
            g = entry_gauss[e]
            mx = means[g, 0]
            my = means[g, 1]
            ia = icovs[g, 0]
            ib = icovs[g, 1]
            ic = icovs[g, 2]
            ae = aeff[g]
            x0 = max(bboxes[g, 0], px0)
            x1 = min(bboxes[g, 1], px0 + tw - 1)
            y0 = max(bboxes[g, 2], py0)
            y1 = min(bboxes[g, 3], py0 + th - 1)
            d_mx = 0.0
            d_my = 0.0
            d_ca = 0.0
            d_cb = 0.0
            d_cc = 0.0
            d_ae = 0.0
            for py in range(y0, y1 + 1):
                dy = py - my
                ly = py - py0
                for px in range(x0, x1 + 1):
                    dx = px - mx
                    q = 0.5 * (ia * dx * dx + ic * dy * dy) + ib * dx * dy
                    gval = math.exp(-q)
                    a = ae * gval
                    smooth = 1.0
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        smooth = 0.0  # clamped: no sensitivity to parameters
                    lx = px - px0
                    t_i = trans[ly, lx] / (1.0 - a)
                    d_a = 0.0
                    for ch in range(n_ch):
                        up = upstream[py, px, ch]
                        col = colors[g, ch]
                        d_a += up * (t_i * col - suffix[ly, lx, ch] / (1.0 - a))
                        entry_grads[e, 6 + ch] += up * t_i * a
                        suffix[ly, lx, ch] += t_i * a * col
                    trans[ly, lx] = t_i
                    d_a *= smooth
                    d_ae += d_a * gval
                    d_q = -(d_a * ae) * gval
                    ux = ia * dx + ib * dy
                    uy = ib * dx + ic * dy
                    d_mx += d_q * (-ux)
                    d_my += d_q * (-uy)
                    d_ca += d_q * (-0.5 * ux * ux)
                    d_cb += d_q * (-ux * uy)
                    d_cc += d_q * (-0.5 * uy * uy)
            entry_grads[e, 0] = d_mx
            entry_grads[e, 1] = d_my
            entry_grads[e, 2] = d_ca
            entry_grads[e, 3] = d_cb
            entry_grads[e, 4] = d_cc
            entry_grads[e, 5] = d_ae
