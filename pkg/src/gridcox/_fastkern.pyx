# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels: point location and segment-edge crossings."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef long long INT64_MAX = 9223372036854775807


def locate_points(double[::1] xs, double[::1] ys,
                  double[:, ::1] vertices, int[:, ::1] triangles,
                  double[:, :, ::1] tinv, double[:, ::1] anchor,
                  double grid_x0, double grid_y0, double grid_dx, double grid_dy,
                  long long grid_nx, long long grid_ny,
                  long long[::1] bin_ptr, long long[::1] bin_items, double tol):
    """Containing triangle per point, -1 if outside; smallest index wins."""
    cdef Py_ssize_t n = xs.shape[0]
    out_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef double x1 = grid_x0 + grid_dx * grid_nx
    cdef double y1 = grid_y0 + grid_dy * grid_ny
    cdef Py_ssize_t i, j
    cdef long long bx, by, b, cand, best
    cdef double x, y, rx, ry, l1, l2, l3
    for i in range(n):
        x = xs[i]
        y = ys[i]
        if x < grid_x0 or x > x1 or y < grid_y0 or y > y1:
            continue
        bx = <long long>((x - grid_x0) / grid_dx)
        if bx < 0:
            bx = 0
        if bx > grid_nx - 1:
            bx = grid_nx - 1
        by = <long long>((y - grid_y0) / grid_dy)
        if by < 0:
            by = 0
        if by > grid_ny - 1:
            by = grid_ny - 1
        b = by * grid_nx + bx
        best = INT64_MAX
        for j in range(bin_ptr[b], bin_ptr[b + 1]):
            cand = bin_items[j]
            rx = x - anchor[cand, 0]
            ry = y - anchor[cand, 1]
            l1 = tinv[cand, 0, 0] * rx + tinv[cand, 0, 1] * ry
            if l1 < -tol:
                continue
            l2 = tinv[cand, 1, 0] * rx + tinv[cand, 1, 1] * ry
            if l2 < -tol:
                continue
            l3 = 1.0 - l1 - l2
            if l3 < -tol:
                continue
            if cand < best:
                best = cand
        if best < INT64_MAX:
            out[i] = best
    return out_arr


def spatial_crossings(double[::1] p0x, double[::1] p0y,
                      double[::1] p1x, double[::1] p1y,
                      double[:, ::1] edge_coords,
                      double grid_x0, double grid_y0, double grid_dx, double grid_dy,
                      long long grid_nx, long long grid_ny,
                      long long[::1] bin_ptr, long long[::1] bin_items,
                      double dedup_tol):
    """Sorted unique edge-crossing parameters t in (0, 1) per segment.

    Returns (flat, offsets): segment k owns flat[offsets[k]:offsets[k+1]].
    """
    cdef Py_ssize_t npair = p0x.shape[0]
    cdef Py_ssize_t nedge = edge_coords.shape[0]
    offsets_arr = np.zeros(npair + 1, dtype=np.int64)
    cdef long long[::1] offsets = offsets_arr
    # visited stamps avoid re-testing an edge listed in several bins
    stamp_arr = np.zeros(nedge, dtype=np.int64)
    cdef long long[::1] stamp = stamp_arr
    cdef long long cur_stamp = 0
    # per-pair crossing buffer (grows if needed)
    cdef Py_ssize_t cap = 64
    buf_arr = np.empty(cap, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    out_chunks = []
    cdef Py_ssize_t k, j, m, nfound, e
    cdef long long ix0, ix1, iy0, iy1, bx, by, b
    cdef double x0, y0, x1, y1, dx, dy, ax, ay, ex, ey, denom, wx, wy, t, s, tmp
    cdef long long total = 0
    for k in range(npair):
        x0 = p0x[k]
        y0 = p0y[k]
        x1 = p1x[k]
        y1 = p1y[k]
        dx = x1 - x0
        dy = y1 - y0
        ix0 = <long long>(((x0 if x0 < x1 else x1) - grid_x0) / grid_dx)
        ix1 = <long long>(((x0 if x0 > x1 else x1) - grid_x0) / grid_dx)
        iy0 = <long long>(((y0 if y0 < y1 else y1) - grid_y0) / grid_dy)
        iy1 = <long long>(((y0 if y0 > y1 else y1) - grid_y0) / grid_dy)
        if ix0 < 0:
            ix0 = 0
        if ix0 > grid_nx - 1:
            ix0 = grid_nx - 1
        if ix1 < 0:
            ix1 = 0
        if ix1 > grid_nx - 1:
            ix1 = grid_nx - 1
        if iy0 < 0:
            iy0 = 0
        if iy0 > grid_ny - 1:
            iy0 = grid_ny - 1
        if iy1 < 0:
            iy1 = 0
        if iy1 > grid_ny - 1:
            iy1 = grid_ny - 1
        cur_stamp += 1
        nfound = 0
        for by in range(iy0, iy1 + 1):
            for bx in range(ix0, ix1 + 1):
                b = by * grid_nx + bx
                for j in range(bin_ptr[b], bin_ptr[b + 1]):
                    e = <Py_ssize_t>bin_items[j]
                    if stamp[e] == cur_stamp:
                        continue
                    stamp[e] = cur_stamp
                    ax = edge_coords[e, 0]
                    ay = edge_coords[e, 1]
                    ex = edge_coords[e, 2] - ax
                    ey = edge_coords[e, 3] - ay
                    denom = dx * ey - dy * ex
                    if denom < 1e-300 and denom > -1e-300:
                        continue
                    wx = ax - x0
                    wy = ay - y0
                    t = (wx * ey - wy * ex) / denom
                    if t <= dedup_tol or t >= 1.0 - dedup_tol:
                        continue
                    s = (wx * dy - wy * dx) / denom
                    if s < -1e-12 or s > 1.0 + 1e-12:
                        continue
                    if nfound == cap:
                        cap = cap * 2
                        new_arr = np.empty(cap, dtype=np.float64)
                        new_arr[:nfound] = buf_arr[:nfound]
                        buf_arr = new_arr
                        buf = buf_arr
                    buf[nfound] = t
                    nfound += 1
        # insertion sort (crossing counts are tiny)
        for j in range(1, nfound):
            tmp = buf[j]
            m = j - 1
            while m >= 0 and buf[m] > tmp:
                buf[m + 1] = buf[m]
                m -= 1
            buf[m + 1] = tmp
        # dedupe within tolerance
        m = 0
        for j in range(nfound):
            if m == 0 or buf[j] - buf[m - 1] > dedup_tol:
                buf[m] = buf[j]
                m += 1
        if m > 0:
            out_chunks.append(buf_arr[:m].copy())
        total += m
        offsets[k + 1] = total
    if out_chunks:
        flat = np.concatenate(out_chunks)
    else:
        flat = np.empty(0, dtype=np.float64)
    return flat, offsets_arr
