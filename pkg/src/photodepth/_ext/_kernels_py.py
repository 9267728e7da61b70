"""Numpy implementations of the hot kernels (fallback for the Cython module)."""

import numpy as np
from scipy.spatial import cKDTree


def bilinear_sample(src, x, y):
    """Sample ``src`` (H, W, C) at continuous coordinates with border clamping.

    Returns ``(values, d_dx, d_dy, inside)``.  The partial derivatives are taken
    inside the bilinear cell that contains the clamped point and are zero along
    an axis on which the coordinate was clamped.  ``inside`` is False where the
    unclamped coordinate lies outside ``[0, W-1] x [0, H-1]``.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    h, w, _ = src.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    in_x = (x >= 0.0) & (x <= w - 1)
    in_y = (y >= 0.0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    wx = (xc - x0)[..., None]
    wy = (yc - y0)[..., None]

    v00 = src[y0, x0]
    v01 = src[y0, x0 + 1]
    v10 = src[y0 + 1, x0]
    v11 = src[y0 + 1, x0 + 1]

    # convex-combination form keeps grid nodes bit-exact
    top = (1.0 - wx) * v00 + wx * v01
    bot = (1.0 - wx) * v10 + wx * v11
    values = (1.0 - wy) * top + wy * bot
    d_dx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
    d_dy = bot - top
    d_dx = np.where(in_x[..., None], d_dx, 0.0)
    d_dy = np.where(in_y[..., None], d_dy, 0.0)
    return values, d_dx, d_dy, in_x & in_y


def radius_hits(query, ref, threshold):
    """For each query point, whether some ref point lies within ``threshold``.

    The decision uses ``dx*dx + dy*dy + dz*dz <= threshold**2``; the KD-tree only
    screens candidates, borderline cases are re-decided with that expression.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    out = np.zeros(len(query), dtype=bool)
    if len(query) == 0 or len(ref) == 0:
        return out
    thr2 = threshold * threshold
    tree = cKDTree(ref)
    dist, _ = tree.query(query, k=1)
    out[dist < threshold * (1.0 - 1e-9)] = True
    unsure = np.flatnonzero(np.abs(dist - threshold) <= threshold * 1e-9)
    if len(unsure):
        cands = tree.query_ball_point(query[unsure], threshold * (1.0 + 1e-6))
        for qi, idx in zip(unsure, cands):
            if not idx:
                continue
            r = ref[idx]
            dx = query[qi, 0] - r[:, 0]
            dy = query[qi, 1] - r[:, 1]
            dz = query[qi, 2] - r[:, 2]
            out[qi] = bool(np.any(dx * dx + dy * dy + dz * dz <= thr2))
    return out
