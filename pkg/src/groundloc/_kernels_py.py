"""Pure numpy implementations of the hot kernels.

Semantics must match ``_ckernels.pyx`` exactly (up to float rounding); the
test-suite runs both against each other.

Index conventions shared by all kernels: arrays are ``[..., row, col]`` with
``row`` along +y and ``col`` along +x. Geometric operations pivot about the
array centre ``((H - 1) / 2, (W - 1) / 2)`` and translations are in cells.
Bilinear sampling treats everything outside the source as zero.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _bilinear_taps(sy: np.ndarray, sx: np.ndarray, h: int, w: int):
    """Four (flat index, weight) taps per sample; out-of-range taps get weight 0."""
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    idx = []
    wts = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx.append(np.where(ok, yy * w + xx, 0))
            wts.append(np.where(ok, wy * wx, 0.0))
    return idx, wts


def warp_source_coords(out_h, out_w, src_h, src_w, cos_t, sin_t, tx, ty):
    """Fractional source (row, col) for every output cell.

    Output cell ``r`` (relative to output centre) samples the source at
    ``R(-theta) (r - t)`` relative to the source centre.
    """
    cy_o, cx_o = (out_h - 1) / 2.0, (out_w - 1) / 2.0
    cy_s, cx_s = (src_h - 1) / 2.0, (src_w - 1) / 2.0
    v, u = np.meshgrid(np.arange(out_h, dtype=np.float64) - cy_o - ty,
                       np.arange(out_w, dtype=np.float64) - cx_o - tx, indexing="ij")
    sx = cos_t * u + sin_t * v + cx_s
    sy = -sin_t * u + cos_t * v + cy_s
    return sy, sx


def warp(src: np.ndarray, cos_t: float, sin_t: float, tx: float, ty: float,
         out_h: int | None = None, out_w: int | None = None) -> np.ndarray:
    """Rigidly resample ``src`` of shape ``(C, H, W)``; zero outside the source."""
    c, h, w = src.shape
    out_h = h if out_h is None else out_h
    out_w = w if out_w is None else out_w
    sy, sx = warp_source_coords(out_h, out_w, h, w, cos_t, sin_t, tx, ty)
    idx, wts = _bilinear_taps(sy.ravel(), sx.ravel(), h, w)
    flat = src.reshape(c, h * w)
    out = np.zeros((c, out_h * out_w), dtype=np.float64)
    for i, wt in zip(idx, wts):
        out += flat[:, i] * wt
    return out.reshape(c, out_h, out_w)


def bilinear_gather(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample a 2-D array at fractional (row, col) positions; zero outside."""
    h, w = img.shape
    idx, wts = _bilinear_taps(np.asarray(rows, np.float64), np.asarray(cols, np.float64), h, w)
    flat = img.ravel()
    out = np.zeros(len(idx[0]), dtype=np.float64)
    for i, wt in zip(idx, wts):
        out += flat[i] * wt
    return out


def voxel_bin(cols: np.ndarray, rows: np.ndarray, slices: np.ndarray, intensity: np.ndarray,
              h: int, w: int, n_slices: int):
    """Accumulate pre-validated integer cell indices.

    Returns ``(occupancy[n_slices, h, w], intensity_sum[h, w], count[h, w])``.
    ``slices`` entries equal to -1 contribute to the intensity column only.
    """
    flat = rows.astype(np.int64) * w + cols.astype(np.int64)
    count = np.bincount(flat, minlength=h * w).astype(np.float64)
    isum = np.bincount(flat, weights=intensity, minlength=h * w)
    occ = np.zeros((n_slices, h * w), dtype=np.float64)
    if n_slices:
        ok = slices >= 0
        sflat = slices[ok].astype(np.int64) * (h * w) + flat[ok]
        occ = np.bincount(sflat, minlength=n_slices * h * w).astype(np.float64)
        occ = occ.reshape(n_slices, h * w)
    return occ.reshape(n_slices, h, w), isum.reshape(h, w), count.reshape(h, w)


def direct_scores(online: np.ndarray, map_emb: np.ndarray, cos_t: np.ndarray, sin_t: np.ndarray,
                  tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    """Score every (yaw, ty, tx) candidate by an explicit dot product.

    ``map_emb`` is ``online``'s footprint padded by ``max|tx|`` / ``max|ty|``
    cells on each side; the rotated online embedding is dotted with the map
    window shifted by the candidate translation.
    """
    h, w = online.shape
    hm, wm = map_emb.shape
    py = (hm - h) // 2
    px = (wm - w) // 2
    out = np.empty((len(cos_t), len(ty), len(tx)), dtype=np.float64)
    for k in range(len(cos_t)):
        rot = warp(online[None], cos_t[k], sin_t[k], 0.0, 0.0)[0]
        for a, dy in enumerate(ty):
            r0 = py + int(dy)
            for b, dx in enumerate(tx):
                c0 = px + int(dx)
                out[k, a, b] = np.einsum("ij,ij->", rot, map_emb[r0:r0 + h, c0:c0 + w])
    return out
