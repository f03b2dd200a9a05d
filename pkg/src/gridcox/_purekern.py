"""Pure-numpy implementations of the geometry kernels.

Fallback used when the compiled extension is unavailable (or when
GRIDCOX_PURE=1).  Semantics match gridcox._fastkern exactly.
"""

import numpy as np


def locate_points(xs, ys, vertices, triangles, tinv, anchor,
                  grid_x0, grid_y0, grid_dx, grid_dy, grid_nx, grid_ny,
                  bin_ptr, bin_items, tol):
    """Containing triangle per point, -1 if outside; smallest index wins."""
    n = xs.size
    out = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return out
    x1 = grid_x0 + grid_dx * grid_nx
    y1 = grid_y0 + grid_dy * grid_ny
    inside = (xs >= grid_x0) & (xs <= x1) & (ys >= grid_y0) & (ys <= y1)
    if not np.any(inside):
        return out
    bx = np.clip(((xs - grid_x0) / grid_dx).astype(np.int64), 0, grid_nx - 1)
    by = np.clip(((ys - grid_y0) / grid_dy).astype(np.int64), 0, grid_ny - 1)
    bins = by * grid_nx + bx
    counts = bin_ptr[bins + 1] - bin_ptr[bins]
    maxc = int(counts.max(initial=0))
    if maxc == 0:
        return out
    cols = np.arange(maxc)
    flat = bin_ptr[bins][:, None] + cols[None, :]
    valid = (cols[None, :] < counts[:, None]) & inside[:, None]
    cand = bin_items[np.clip(flat, 0, bin_items.size - 1)]
    rel_x = xs[:, None] - anchor[cand, 0]
    rel_y = ys[:, None] - anchor[cand, 1]
    l1 = tinv[cand, 0, 0] * rel_x + tinv[cand, 0, 1] * rel_y
    l2 = tinv[cand, 1, 0] * rel_x + tinv[cand, 1, 1] * rel_y
    l3 = 1.0 - l1 - l2
    hit = valid & (l1 >= -tol) & (l2 >= -tol) & (l3 >= -tol)
    masked = np.where(hit, cand, np.iinfo(np.int64).max)
    best = masked.min(axis=1)
    found = best < np.iinfo(np.int64).max
    out[found] = best[found]
    return out


def spatial_crossings(p0x, p0y, p1x, p1y, edge_coords,
                      grid_x0, grid_y0, grid_dx, grid_dy, grid_nx, grid_ny,
                      bin_ptr, bin_items, dedup_tol):
    """Sorted unique edge-crossing parameters t in (0, 1) per segment.

    Returns (flat, offsets): segment k owns flat[offsets[k]:offsets[k+1]].
    """
    npair = p0x.size
    offsets = np.zeros(npair + 1, dtype=np.int64)
    chunks = []
    ax = edge_coords[:, 0]
    ay = edge_coords[:, 1]
    ex = edge_coords[:, 2] - ax
    ey = edge_coords[:, 3] - ay
    for k in range(npair):
        x0, y0, x1, y1 = p0x[k], p0y[k], p1x[k], p1y[k]
        ix0 = int(np.clip((min(x0, x1) - grid_x0) / grid_dx, 0, grid_nx - 1))
        ix1 = int(np.clip((max(x0, x1) - grid_x0) / grid_dx, 0, grid_nx - 1))
        iy0 = int(np.clip((min(y0, y1) - grid_y0) / grid_dy, 0, grid_ny - 1))
        iy1 = int(np.clip((max(y0, y1) - grid_y0) / grid_dy, 0, grid_ny - 1))
        cand = []
        for by in range(iy0, iy1 + 1):
            base = by * grid_nx
            for bx in range(ix0, ix1 + 1):
                b = base + bx
                cand.append(bin_items[bin_ptr[b]:bin_ptr[b + 1]])
        if not cand:
            offsets[k + 1] = offsets[k]
            continue
        cand = np.unique(np.concatenate(cand))
        dx = x1 - x0
        dy = y1 - y0
        denom = dx * ey[cand] - dy * ex[cand]
        with np.errstate(divide="ignore", invalid="ignore"):
            wx = ax[cand] - x0
            wy = ay[cand] - y0
            t = (wx * ey[cand] - wy * ex[cand]) / denom
            s = (wx * dy - wy * dx) / denom
        ok = (np.abs(denom) > 1e-300) & (t > dedup_tol) & (t < 1.0 - dedup_tol)
        ok &= (s >= -1e-12) & (s <= 1.0 + 1e-12)
        ts = np.sort(t[ok])
        if ts.size > 1:
            keep = np.concatenate([[True], np.diff(ts) > dedup_tol])
            ts = ts[keep]
        chunks.append(ts)
        offsets[k + 1] = offsets[k] + ts.size
    flat = np.concatenate(chunks) if chunks else np.empty(0)
    return flat, offsets
