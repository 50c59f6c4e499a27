# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_kernels_py``; same signatures and semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

BACKEND = "cython"


cdef inline double _sample(const double[:, ::1] img, Py_ssize_t h, Py_ssize_t w,
                           double sy, double sx) noexcept nogil:
    cdef double fy0 = floor(sy)
    cdef double fx0 = floor(sx)
    cdef Py_ssize_t y0 = <Py_ssize_t>fy0
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0
    cdef double fy = sy - fy0
    cdef double fx = sx - fx0
    cdef double acc = 0.0
    if y0 >= 0 and y0 + 1 < h and x0 >= 0 and x0 + 1 < w:
        acc = acc + img[y0, x0] * ((1.0 - fy) * (1.0 - fx))
        acc = acc + img[y0, x0 + 1] * ((1.0 - fy) * fx)
        acc = acc + img[y0 + 1, x0] * (fy * (1.0 - fx))
        return acc + img[y0 + 1, x0 + 1] * (fy * fx)
    if y0 >= 0 and y0 < h:
        if x0 >= 0 and x0 < w:
            acc = acc + img[y0, x0] * ((1.0 - fy) * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < w:
            acc = acc + img[y0, x0 + 1] * ((1.0 - fy) * fx)
    if y0 + 1 >= 0 and y0 + 1 < h:
        if x0 >= 0 and x0 < w:
            acc = acc + img[y0 + 1, x0] * (fy * (1.0 - fx))
        if x0 + 1 >= 0 and x0 + 1 < w:
            acc = acc + img[y0 + 1, x0 + 1] * (fy * fx)
    return acc


def warp(src, double cos_t, double sin_t, double tx, double ty, out_h=None, out_w=None):
    cdef const double[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t c = s.shape[0], h = s.shape[1], w = s.shape[2]
    cdef Py_ssize_t oh = h if out_h is None else out_h
    cdef Py_ssize_t ow = w if out_w is None else out_w
    out = np.zeros((c, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double cy_o = (oh - 1) / 2.0, cx_o = (ow - 1) / 2.0
    cdef double cy_s = (h - 1) / 2.0, cx_s = (w - 1) / 2.0
    cdef Py_ssize_t ch, i, j
    cdef double u, v, sx, sy
    cdef const double[:, ::1] plane
    for ch in range(c):
        plane = s[ch]
        with nogil:
            for i in range(oh):
                v = i - cy_o - ty
                for j in range(ow):
                    u = j - cx_o - tx
                    sx = cos_t * u + sin_t * v + cx_s
                    sy = -sin_t * u + cos_t * v + cy_s
                    o[ch, i, j] = _sample(plane, h, w, sy, sx)
    return out


def bilinear_gather(img, rows, cols):
    cdef const double[:, ::1] m = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[::1] r = np.ascontiguousarray(rows, dtype=np.float64)
    cdef const double[::1] cc = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], k
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(n):
            o[k] = _sample(m, h, w, r[k], cc[k])
    return out


def voxel_bin(cols, rows, slices, intensity, Py_ssize_t h, Py_ssize_t w, Py_ssize_t n_slices):
    cdef const long[::1] cv = np.ascontiguousarray(cols, dtype=np.int64)
    cdef const long[::1] rv = np.ascontiguousarray(rows, dtype=np.int64)
    cdef const long[::1] sv = np.ascontiguousarray(slices, dtype=np.int64)
    cdef const double[::1] iv = np.ascontiguousarray(intensity, dtype=np.float64)
    occ = np.zeros((n_slices, h, w), dtype=np.float64)
    isum = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    cdef double[:, :, ::1] o = occ
    cdef double[:, ::1] s = isum
    cdef double[:, ::1] n = count
    cdef Py_ssize_t k, npts = cv.shape[0]
    with nogil:
        for k in range(npts):
            n[rv[k], cv[k]] += 1.0
            s[rv[k], cv[k]] += iv[k]
            if sv[k] >= 0:
                o[sv[k], rv[k], cv[k]] += 1.0
    return occ, isum, count


def direct_scores(online, map_emb, cos_t, sin_t, tx, ty):
    cdef const double[:, ::1] m = np.ascontiguousarray(map_emb, dtype=np.float64)
    cdef const long[::1] txv = np.ascontiguousarray(tx, dtype=np.int64)
    cdef const long[::1] tyv = np.ascontiguousarray(ty, dtype=np.int64)
    src = np.ascontiguousarray(online, dtype=np.float64)[None]
    cdef Py_ssize_t h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t py = (m.shape[0] - h) // 2, px = (m.shape[1] - w) // 2
    cdef Py_ssize_t nk = len(cos_t), na = tyv.shape[0], nb = txv.shape[0]
    out = np.empty((nk, na, nb), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef const double[:, ::1] rot
    cdef Py_ssize_t k, a, b, i, j, r0, c0
    cdef double acc
    for k in range(nk):
        rot = warp(src, cos_t[k], sin_t[k], 0.0, 0.0)[0]
        with nogil:
            for a in range(na):
                r0 = py + tyv[a]
                for b in range(nb):
                    c0 = px + txv[b]
                    acc = 0.0
                    for i in range(h):
                        for j in range(w):
                            acc = acc + rot[i, j] * m[r0 + i, c0 + j]
                    o[k, a, b] = acc
    return out
