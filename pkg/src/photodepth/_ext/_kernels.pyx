# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; signatures mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def bilinear_sample(src, x, y):
    cdef double[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    xa = np.ascontiguousarray(x, dtype=np.float64)
    ya = np.ascontiguousarray(y, dtype=np.float64)
    out_shape = xa.shape
    cdef double[::1] xs = xa.reshape(-1)
    cdef double[::1] ys = ya.reshape(-1)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1], nc = s.shape[2]
    cdef Py_ssize_t n = xs.shape[0]

    values = np.empty((n, nc), dtype=np.float64)
    d_dx = np.empty((n, nc), dtype=np.float64)
    d_dy = np.empty((n, nc), dtype=np.float64)
    inside = np.empty(n, dtype=np.uint8)
    cdef double[:, ::1] vo = values
    cdef double[:, ::1] gx = d_dx
    cdef double[:, ::1] gy = d_dy
    cdef unsigned char[::1] ins = inside

    cdef Py_ssize_t i, c, x0, y0
    cdef double xv, yv, xc, yc, wx, wy, v00, v01, v10, v11, top, bot
    cdef bint in_x, in_y
    cdef double wmax = w - 1, hmax = h - 1
    for i in range(n):
        xv = xs[i]
        yv = ys[i]
        in_x = xv >= 0.0 and xv <= wmax
        in_y = yv >= 0.0 and yv <= hmax
        xc = xv if xv > 0.0 else 0.0
        if xc > wmax:
            xc = wmax
        yc = yv if yv > 0.0 else 0.0
        if yc > hmax:
            yc = hmax
        x0 = <Py_ssize_t>floor(xc)
        if x0 > w - 2:
            x0 = w - 2
        y0 = <Py_ssize_t>floor(yc)
        if y0 > h - 2:
            y0 = h - 2
        wx = xc - x0
        wy = yc - y0
        ins[i] = in_x and in_y
        for c in range(nc):
            v00 = s[y0, x0, c]
            v01 = s[y0, x0 + 1, c]
            v10 = s[y0 + 1, x0, c]
            v11 = s[y0 + 1, x0 + 1, c]
            top = (1.0 - wx) * v00 + wx * v01
            bot = (1.0 - wx) * v10 + wx * v11
            vo[i, c] = (1.0 - wy) * top + wy * bot
            gx[i, c] = ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10)) if in_x else 0.0
            gy[i, c] = (bot - top) if in_y else 0.0

    shp = tuple(out_shape) + (nc,)
    return (values.reshape(shp), d_dx.reshape(shp), d_dy.reshape(shp),
            inside.reshape(out_shape).astype(bool))


def radius_hits(query, ref, double threshold):
    """Uniform-grid fixed-radius search; decision ``d2 <= threshold**2``."""
    cdef double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t nq = q.shape[0], nr = r.shape[0]
    hits = np.zeros(nq, dtype=np.uint8)
    if nq == 0 or nr == 0:
        return hits.astype(bool)
    cdef unsigned char[::1] out = hits

    ref_np = np.asarray(r)
    lo = ref_np.min(axis=0)
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    # slightly enlarged cell keeps every in-radius neighbour within +-1 cell
    cdef double cell = threshold * (1.0 + 1e-9)
    cells = np.floor((ref_np - lo) / cell).astype(np.int64)
    dims = cells.max(axis=0) + 1
    cdef long long nx = dims[0], ny = dims[1], nz = dims[2]
    keys = (cells[:, 0] * ny + cells[:, 1]) * nz + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    cdef long long[::1] skeys = np.ascontiguousarray(keys[order])
    cdef double[:, ::1] sr = np.ascontiguousarray(ref_np[order])

    cdef double thr2 = threshold * threshold
    cdef Py_ssize_t i, j, lo_i, hi_i, mid
    cdef long long cx, cy, cz, ax, ay, az, key
    cdef int ox, oy, oz
    cdef double dx, dy, dz, d2
    cdef bint found
    for i in range(nq):
        cx = <long long>floor((q[i, 0] - lx) / cell)
        cy = <long long>floor((q[i, 1] - ly) / cell)
        cz = <long long>floor((q[i, 2] - lz) / cell)
        found = False
        for ox in range(-1, 2):
            ax = cx + ox
            if ax < 0 or ax >= nx:
                continue
            for oy in range(-1, 2):
                ay = cy + oy
                if ay < 0 or ay >= ny:
                    continue
                for oz in range(-1, 2):
                    az = cz + oz
                    if az < 0 or az >= nz:
                        continue
                    key = (ax * ny + ay) * nz + az
                    lo_i = 0
                    hi_i = nr
                    while lo_i < hi_i:
                        mid = (lo_i + hi_i) >> 1
                        if skeys[mid] < key:
                            lo_i = mid + 1
                        else:
                            hi_i = mid
                    j = lo_i
                    while j < nr and skeys[j] == key:
                        dx = q[i, 0] - sr[j, 0]
                        dy = q[i, 1] - sr[j, 1]
                        dz = q[i, 2] - sr[j, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 <= thr2:
                            found = True
                            break
                        j += 1
                    if found:
                        break
                if found:
                    break
            if found:
                break
        out[i] = found
    return hits.astype(bool)
