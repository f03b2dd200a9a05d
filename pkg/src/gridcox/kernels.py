"""Backend selection for the geometry kernels.

The compiled extension is used when importable; set GRIDCOX_PURE=1 to force
the numpy fallback.  Both backends implement the same two functions with
identical semantics.
"""

import os

from . import _purekern

_impl = _purekern
_backend = "pure"
if os.environ.get("GRIDCOX_PURE", "0") not in ("1", "true", "yes"):
    try:
        from . import _fastkern

        _impl = _fastkern
        _backend = "cython"
    except ImportError:
        pass


def backend_name() -> str:
    return _backend


def locate_points(xs, ys, loc, tol):
    """Containing triangle index per point (-1 outside the hull)."""
    return _impl.locate_points(
        xs, ys, loc.vertices, loc.triangles, loc.tinv, loc.anchor,
        loc.grid_x0, loc.grid_y0, loc.grid_dx, loc.grid_dy,
        loc.grid_nx, loc.grid_ny, loc.bin_ptr, loc.bin_items, tol,
    )


def spatial_crossings(p0x, p0y, p1x, p1y, loc, edges, dedup_tol=1e-12):
    """Edge-crossing parameters for a batch of straight segments."""
    return _impl.spatial_crossings(
        p0x, p0y, p1x, p1y, edges.coords,
        loc.grid_x0, loc.grid_y0, loc.grid_dx, loc.grid_dy,
        loc.grid_nx, loc.grid_ny, edges.bin_ptr, edges.bin_items, dedup_tol,
    )
