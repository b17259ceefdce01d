# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, nonecheck=False
"""Compiled front-to-back compositing of projected 2D Gaussians.

Every splat is described by its pixel-space center, its conic (inverse 2D
covariance, packed as ``(A, B, C)`` with power ``A dx^2 + 2 B dx dy + C dy^2``),
an opacity and an ``F``-channel feature row. Splats arrive already sorted
front to back. A pixel receives a splat only when the power is at most 9
(the 3-sigma ellipse). The background feature fills the residual
transmittance.

The backward pass never divides by ``1 - a``; it walks each pixel's list back
to front keeping the suffix composite ``S``, so fully opaque splats are fine.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor, ceil

cnp.import_array()

cdef int TILE = 16
cdef double CUTOFF = 9.0


def bin_tiles(double[:, ::1] means, double[:, ::1] conics, int height, int width):
    """Bucket splats into 16x16 tiles, keeping input (depth) order per tile.

    Returns ``(offsets, ids)``; tile ``t`` owns ``ids[offsets[t]:offsets[t+1]]``.
    """
    cdef Py_ssize_t m = means.shape[0]
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef Py_ssize_t ntiles = tiles_x * tiles_y
    cdef cnp.int64_t[:, ::1] rect = np.zeros((m, 4), dtype=np.int64)
    cdef cnp.int64_t[::1] offsets = np.zeros(ntiles + 1, dtype=np.int64)
    cdef Py_ssize_t i, t
    cdef int tx, ty, j0, j1, i0, i1
    cdef double a, b, c, det, sx, sy

    for i in range(m):
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        det = a * c - b * b
        if det <= 0.0 or a <= 0.0 or c <= 0.0:
            continue
        # half-extent of the q <= 9 ellipse, padded against rounding
        sx = 3.0 * sqrt(c / det) * (1.0 + 1e-9) + 1e-9
        sy = 3.0 * sqrt(a / det) * (1.0 + 1e-9) + 1e-9
        j0 = <int>max(0.0, ceil(means[i, 0] - sx - 0.5))
        j1 = <int>min(width - 1.0, floor(means[i, 0] + sx - 0.5))
        i0 = <int>max(0.0, ceil(means[i, 1] - sy - 0.5))
        i1 = <int>min(height - 1.0, floor(means[i, 1] + sy - 0.5))
        if j0 > j1 or i0 > i1:
            continue
        rect[i, 0] = j0 // TILE
        rect[i, 1] = j1 // TILE + 1
        rect[i, 2] = i0 // TILE
        rect[i, 3] = i1 // TILE + 1
        for ty in range(rect[i, 2], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 1]):
                offsets[ty * tiles_x + tx + 1] += 1

    for t in range(ntiles):
        offsets[t + 1] += offsets[t]
    cdef cnp.int64_t[::1] ids = np.empty(offsets[ntiles], dtype=np.int64)
    cdef cnp.int64_t[::1] fill = np.array(offsets[:ntiles], dtype=np.int64)
    for i in range(m):
        for ty in range(rect[i, 2], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 1]):
                t = ty * tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return np.asarray(offsets), np.asarray(ids)


def rasterize_forward(double[:, ::1] means, double[:, ::1] conics,
                      double[::1] opacities, double[:, ::1] feats,
                      double[::1] background, int height, int width):
    cdef Py_ssize_t nf = feats.shape[1]
    out_arr = np.empty((height, width, nf), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    offsets_arr, ids_arr = bin_tiles(means, conics, height, width)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef cnp.int64_t[::1] ids = ids_arr
    cdef double[::1] acc = np.zeros(nf, dtype=np.float64)
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef int tx, ty, px, py
    cdef Py_ssize_t k, i, f
    cdef double cx, cy, dx, dy, q, alpha, trans, w

    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    cy = py + 0.5
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        cx = px + 0.5
                        trans = 1.0
                        for f in range(nf):
                            acc[f] = 0.0
                        for k in range(offsets[ty * tiles_x + tx], offsets[ty * tiles_x + tx + 1]):
                            i = ids[k]
                            dx = cx - means[i, 0]
                            dy = cy - means[i, 1]
                            q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                            if q > CUTOFF:
                                continue
                            alpha = opacities[i] * exp(-0.5 * q)
                            w = alpha * trans
                            for f in range(nf):
                                acc[f] += w * feats[i, f]
                            trans = trans * (1.0 - alpha)
                        for f in range(nf):
                            out[py, px, f] = acc[f] + trans * background[f]
    return out_arr


def rasterize_backward(double[:, ::1] means, double[:, ::1] conics,
                       double[::1] opacities, double[:, ::1] feats,
                       double[::1] background, double[:, :, ::1] grad_out):
    cdef int height = grad_out.shape[0]
    cdef int width = grad_out.shape[1]
    cdef Py_ssize_t m = means.shape[0]
    cdef Py_ssize_t nf = feats.shape[1]
    gm_arr = np.zeros((m, 2), dtype=np.float64)
    gc_arr = np.zeros((m, 3), dtype=np.float64)
    go_arr = np.zeros(m, dtype=np.float64)
    gf_arr = np.zeros((m, nf), dtype=np.float64)
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, ::1] gc = gc_arr
    cdef double[::1] go = go_arr
    cdef double[:, ::1] gf = gf_arr

    offsets_arr, ids_arr = bin_tiles(means, conics, height, width)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef cnp.int64_t[::1] ids = ids_arr
    cdef Py_ssize_t longest = 0
    if len(offsets_arr) > 1:
        longest = int(np.max(np.diff(offsets_arr)))
    cdef cnp.int64_t[::1] hit = np.empty(max(longest, 1), dtype=np.int64)
    cdef double[::1] hit_alpha = np.empty(max(longest, 1), dtype=np.float64)
    cdef double[::1] hit_gauss = np.empty(max(longest, 1), dtype=np.float64)
    cdef double[::1] hit_trans = np.empty(max(longest, 1), dtype=np.float64)
    cdef double[::1] suffix = np.empty(nf, dtype=np.float64)

    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef int tx, ty, px, py
    cdef Py_ssize_t k, i, f, n, j
    cdef double cx, cy, dx, dy, q, g, alpha, trans, d_alpha, d_q, grad

    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    cy = py + 0.5
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        cx = px + 0.5
                        trans = 1.0
                        n = 0
                        for k in range(offsets[ty * tiles_x + tx], offsets[ty * tiles_x + tx + 1]):
                            i = ids[k]
                            dx = cx - means[i, 0]
                            dy = cy - means[i, 1]
                            q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                            if q > CUTOFF:
                                continue
                            g = exp(-0.5 * q)
                            alpha = opacities[i] * g
                            hit[n] = i
                            hit_alpha[n] = alpha
                            hit_gauss[n] = g
                            hit_trans[n] = trans
                            n = n + 1
                            trans = trans * (1.0 - alpha)
                        for f in range(nf):
                            suffix[f] = background[f]
                        for j in range(n - 1, -1, -1):
                            i = hit[j]
                            alpha = hit_alpha[j]
                            trans = hit_trans[j]
                            d_alpha = 0.0
                            for f in range(nf):
                                grad = grad_out[py, px, f]
                                gf[i, f] += grad * alpha * trans
                                d_alpha += grad * trans * (feats[i, f] - suffix[f])
                                suffix[f] = alpha * feats[i, f] + (1.0 - alpha) * suffix[f]
                            go[i] += d_alpha * hit_gauss[j]
                            d_q = -0.5 * alpha * d_alpha
                            dx = cx - means[i, 0]
                            dy = cy - means[i, 1]
                            gc[i, 0] += d_q * dx * dx
                            gc[i, 1] += d_q * 2.0 * dx * dy
                            gc[i, 2] += d_q * dy * dy
                            gm[i, 0] += -2.0 * d_q * (conics[i, 0] * dx + conics[i, 1] * dy)
                            gm[i, 1] += -2.0 * d_q * (conics[i, 1] * dx + conics[i, 2] * dy)
    return gm_arr, gc_arr, go_arr, gf_arr
