"""Depth-sorted alpha compositing of projected 2D Gaussians, forward and backward.

Pixel ``(x, y)`` is sampled at its centre ``(x + 0.5, y + 0.5)``. Splats are
sorted front to back by depth (ties by id). A splat is considered at a pixel
only inside its 3-sigma box; its alpha is clamped to 0.99, contributions below
1/255 are skipped and a pixel stops once transmittance would drop below 1e-4.

Two traversal paths exist: the reference path walks every splat for every
pixel, the tiled path walks per-16x16-tile lists that are supersets of the
splats passing the box test, in the same order. Both run identical
arithmetic per pixel and therefore produce bit-identical images.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE = 16


class StaleRecordsError(RuntimeError):
    pass


@dataclass
class Splats:
    """A batch of projected Gaussians (one row per splat)."""

    mean2d: np.ndarray   # (M, 2) pixels
    cov2d: np.ndarray    # (M, 2, 2) pixels^2, already dilated
    depth: np.ndarray    # (M,)
    color: np.ndarray    # (M, 3)
    opacity: np.ndarray  # (M,)
    ids: np.ndarray      # (M,) stable ids for tie-breaking
    source: np.ndarray | None = None  # (M,) row in the originating Gaussian set

    def __len__(self) -> int:
        return int(self.depth.shape[0])

    def checksum(self) -> int:
        c = 0
        for a in (self.mean2d, self.cov2d, self.depth, self.color, self.opacity, self.ids):
            c = zlib.crc32(np.ascontiguousarray(a).tobytes(), c)
        return c

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def screen_radius(cov2d: np.ndarray) -> np.ndarray:
    """Three times the square root of the larger eigenvalue of each 2x2 covariance."""
    a = cov2d[:, 0, 0]
    c = cov2d[:, 1, 1]
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return 3.0 * np.sqrt(np.maximum(lam, 0.0))


@dataclass
class RasterRecords:
    splats: Splats
    checksum: int
    order: np.ndarray        # sorted position -> splat row
    width: int
    height: int
    background: np.ndarray
    final_T: np.ndarray      # (H, W)
    n_contrib: np.ndarray    # (H, W) list position after the last contributor
    tiled: bool
    tile_offsets: np.ndarray
    tile_lists: np.ndarray
    packed: tuple = field(repr=False, default=())
    skipped: int = 0


@njit(cache=True)
def _pixel_forward(fx, fy, lst, start, stop, mx, my, ca, cb, cc, op, col, rad):
    T = 1.0
    r = 0.0
    g = 0.0
    b = 0.0
    last = start
    for j in range(start, stop):
        k = lst[j]
        dx = fx - mx[k]
        dy = fy - my[k]
        if abs(dx) > rad[k] or abs(dy) > rad[k]:
            continue
        power = -0.5 * (ca[k] * dx * dx + cc[k] * dy * dy) - cb[k] * dx * dy
        if power > 0.0:
            continue
        alpha = op[k] * np.exp(power)
        if alpha > ALPHA_MAX:
            alpha = ALPHA_MAX
        if alpha < ALPHA_MIN:
            continue
        test_T = T * (1.0 - alpha)
        if test_T < T_MIN:
            break
        w = alpha * T
        r += col[k, 0] * w
        g += col[k, 1] * w
        b += col[k, 2] * w
        T = test_T
        last = j + 1
    return T, last, r, g, b


@njit(cache=True)
def _pixel_backward(fx, fy, lst, start, last, T, gr, gg, gb, bgdot,
                    mx, my, ca, cb, cc, op, col, rad,
                    g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col):
    S = T * bgdot
    for j in range(last - 1, start - 1, -1):
        k = lst[j]
        dx = fx - mx[k]
        dy = fy - my[k]
        if abs(dx) > rad[k] or abs(dy) > rad[k]:
            continue
        power = -0.5 * (ca[k] * dx * dx + cc[k] * dy * dy) - cb[k] * dx * dy
        if power > 0.0:
            continue
        G = np.exp(power)
        a = op[k] * G
        clamped = a > ALPHA_MAX
        alpha = ALPHA_MAX if clamped else a
        if alpha < ALPHA_MIN:
            continue
        T = T / (1.0 - alpha)
        w = alpha * T
        cg = col[k, 0] * gr + col[k, 1] * gg + col[k, 2] * gb
        g_col[k, 0] += w * gr
        g_col[k, 1] += w * gg
        g_col[k, 2] += w * gb
        g_alpha = cg * T - S / (1.0 - alpha)
        S += w * cg
        if not clamped:
            g_op[k] += g_alpha * G
            gp = g_alpha * alpha
            g_mx[k] += gp * (ca[k] * dx + cb[k] * dy)
            g_my[k] += gp * (cb[k] * dx + cc[k] * dy)
            g_ca[k] += gp * (-0.5 * dx * dx)
            g_cb[k] += gp * (-dx * dy)
            g_cc[k] += gp * (-0.5 * dy * dy)


@njit(cache=True)
def _forward_reference(W, H, mx, my, ca, cb, cc, op, col, rad, bg, img, finalT, ncontrib):
    M = mx.shape[0]
    lst = np.arange(M)
    for py in range(H):
        for px in range(W):
            T, last, r, g, b = _pixel_forward(px + 0.5, py + 0.5, lst, 0, M, mx, my, ca, cb, cc, op, col, rad)
            img[py, px, 0] = r + T * bg[0]
            img[py, px, 1] = g + T * bg[1]
            img[py, px, 2] = b + T * bg[2]
            finalT[py, px] = T
            ncontrib[py, px] = last


@njit(cache=True)
def _backward_reference(W, H, mx, my, ca, cb, cc, op, col, rad, bg, finalT, ncontrib, gimg,
                        g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col):
    M = mx.shape[0]
    lst = np.arange(M)
    for py in range(H):
        for px in range(W):
            gr = gimg[py, px, 0]
            gg = gimg[py, px, 1]
            gb = gimg[py, px, 2]
            bgdot = bg[0] * gr + bg[1] * gg + bg[2] * gb
            _pixel_backward(px + 0.5, py + 0.5, lst, 0, ncontrib[py, px], finalT[py, px], gr, gg, gb, bgdot,
                            mx, my, ca, cb, cc, op, col, rad, g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col)


@njit(cache=True)
def _bin_tiles(W, H, mx, my, rad):
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    M = mx.shape[0]
    x0 = np.empty(M, np.int64)
    x1 = np.empty(M, np.int64)
    y0 = np.empty(M, np.int64)
    y1 = np.empty(M, np.int64)
    counts = np.zeros(ntx * nty, np.int64)
    for k in range(M):
        # one extra pixel of slack on every side keeps the lists supersets
        a = int(np.floor(mx[k] - rad[k] - 0.5)) - 1
        bx = int(np.ceil(mx[k] + rad[k] - 0.5)) + 1
        c = int(np.floor(my[k] - rad[k] - 0.5)) - 1
        d = int(np.ceil(my[k] + rad[k] - 0.5)) + 1
        a = max(a, 0) // TILE
        c = max(c, 0) // TILE
        bx = min(bx, W - 1)
        d = min(d, H - 1)
        if bx < 0 or d < 0:
            x0[k] = 1
            x1[k] = 0
            y0[k] = 1
            y1[k] = 0
            continue
        bx = bx // TILE
        d = d // TILE
        x0[k] = a
        x1[k] = bx
        y0[k] = c
        y1[k] = d
        for ty in range(c, d + 1):
            for tx in range(a, bx + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, np.int64)
    for t in range(ntx * nty):
        offsets[t + 1] = offsets[t] + counts[t]
    lists = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for k in range(M):
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                t = ty * ntx + tx
                lists[fill[t]] = k
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def _forward_tiled(W, H, offsets, lists, mx, my, ca, cb, cc, op, col, rad, bg, img, finalT, ncontrib):
    ntx = (W + TILE - 1) // TILE
    for py in range(H):
        for px in range(W):
            t = (py // TILE) * ntx + (px // TILE)
            T, last, r, g, b = _pixel_forward(px + 0.5, py + 0.5, lists, offsets[t], offsets[t + 1],
                                              mx, my, ca, cb, cc, op, col, rad)
            img[py, px, 0] = r + T * bg[0]
            img[py, px, 1] = g + T * bg[1]
            img[py, px, 2] = b + T * bg[2]
            finalT[py, px] = T
            ncontrib[py, px] = last


@njit(cache=True)
def _backward_tiled(W, H, offsets, lists, mx, my, ca, cb, cc, op, col, rad, bg, finalT, ncontrib, gimg,
                    g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col):
    ntx = (W + TILE - 1) // TILE
    for py in range(H):
        for px in range(W):
            t = (py // TILE) * ntx + (px // TILE)
            gr = gimg[py, px, 0]
            gg = gimg[py, px, 1]
            gb = gimg[py, px, 2]
            bgdot = bg[0] * gr + bg[1] * gg + bg[2] * gb
            _pixel_backward(px + 0.5, py + 0.5, lists, offsets[t], ncontrib[py, px], finalT[py, px],
                            gr, gg, gb, bgdot, mx, my, ca, cb, cc, op, col, rad,
                            g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col)


def rasterize(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0), tiled: bool = True):
    """Blend splats into an ``(H, W, 3)`` image; returns ``(image, records)``."""
    bg = np.asarray(background, dtype=np.float64)
    cov = np.asarray(splats.cov2d, dtype=np.float64)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    finite = (np.isfinite(splats.mean2d).all(axis=1) & np.isfinite(cov).all(axis=(1, 2))
              & np.isfinite(splats.opacity) & np.isfinite(splats.color).all(axis=1) & np.isfinite(splats.depth))
    valid = finite & (det > 0.0)
    idx = np.flatnonzero(valid)
    ids = np.asarray(splats.ids, dtype=np.int64)
    order = idx[np.lexsort((ids[idx], np.asarray(splats.depth)[idx]))]

    c = cov[order]
    d = det[order]
    ca = np.ascontiguousarray(c[:, 1, 1] / d)
    cb = np.ascontiguousarray(-0.5 * (c[:, 0, 1] + c[:, 1, 0]) / d)
    cc = np.ascontiguousarray(c[:, 0, 0] / d)
    mx = np.ascontiguousarray(splats.mean2d[order, 0], dtype=np.float64)
    my = np.ascontiguousarray(splats.mean2d[order, 1], dtype=np.float64)
    op = np.ascontiguousarray(splats.opacity[order], dtype=np.float64)
    col = np.ascontiguousarray(splats.color[order], dtype=np.float64)
    rad = np.ascontiguousarray(screen_radius(c))

    img = np.empty((height, width, 3))
    finalT = np.empty((height, width))
    ncontrib = np.empty((height, width), dtype=np.int64)
    if tiled:
        offsets, lists = _bin_tiles(width, height, mx, my, rad)
        _forward_tiled(width, height, offsets, lists, mx, my, ca, cb, cc, op, col, rad, bg, img, finalT, ncontrib)
    else:
        offsets = lists = np.zeros(0, dtype=np.int64)
        _forward_reference(width, height, mx, my, ca, cb, cc, op, col, rad, bg, img, finalT, ncontrib)
    rec = RasterRecords(splats, splats.checksum(), order, width, height, bg, finalT, ncontrib, tiled,
                        offsets, lists, (mx, my, ca, cb, cc, op, col, rad, c, d),
                        skipped=int((~valid).sum()))
    return img, rec


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    color: np.ndarray
    opacity: np.ndarray


def rasterize_backward(records: RasterRecords, grad_image: np.ndarray) -> SplatGrads:
    """Exact gradients of the blended image w.r.t. every splat's 2D parameters (input order)."""
    if records.splats.checksum() != records.checksum:
        raise StaleRecordsError("splats were modified after the forward pass")
    mx, my, ca, cb, cc, op, col, rad, c, d = records.packed
    M = mx.shape[0]
    g = np.ascontiguousarray(grad_image, dtype=np.float64).reshape(records.height, records.width, 3)
    g_mx, g_my, g_ca, g_cb, g_cc, g_op = (np.zeros(M) for _ in range(6))
    g_col = np.zeros((M, 3))
    args = (mx, my, ca, cb, cc, op, col, rad, records.background, records.final_T, records.n_contrib, g,
            g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col)
    if records.tiled:
        _backward_tiled(records.width, records.height, records.tile_offsets, records.tile_lists, *args)
    else:
        _backward_reference(records.width, records.height, *args)

    # conic -> covariance: dL/dcov = -K Gk K with K the inverse covariance
    K = np.empty((M, 2, 2))
    K[:, 0, 0] = ca
    K[:, 0, 1] = K[:, 1, 0] = cb
    K[:, 1, 1] = cc
    Gk = np.empty((M, 2, 2))
    Gk[:, 0, 0] = g_ca
    Gk[:, 0, 1] = Gk[:, 1, 0] = 0.5 * g_cb
    Gk[:, 1, 1] = g_cc
    g_cov_sorted = -K @ Gk @ K

    n = len(records.splats)
    out = SplatGrads(np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros((n, 3)), np.zeros(n))
    o = records.order
    out.mean2d[o, 0] = g_mx
    out.mean2d[o, 1] = g_my
    out.cov2d[o] = g_cov_sorted
    out.color[o] = g_col
    out.opacity[o] = g_op
    return out
