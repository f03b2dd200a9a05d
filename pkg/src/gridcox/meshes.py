"""Meshes and piecewise-linear finite-element bases on the plane, circle and line.

Three mesh types carry the latent fields: a conforming planar triangulation
over the (inflated) arena, a knot mesh on the circle of head directions, and
a knot mesh on the experiment time axis.  Each exposes nodal hat-function
evaluation plus lumped mass and stiffness matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import OutOfDomainError, ValidationError

TWO_PI = 2.0 * np.pi

# Barycentric containment tolerance; on-edge points belong to every incident
# triangle and ties resolve to the smallest triangle index.
BARY_TOL = 1e-12


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned arena rectangle, coordinates in cm."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValidationError(
                f"degenerate arena rectangle: ({self.x0},{self.y0})-({self.x1},{self.y1})"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def inflate(self, margin: float) -> "Rectangle":
        return Rectangle(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    def contains(self, x, y, tol: float = 0.0):
        return (
            (x >= self.x0 - tol)
            & (x <= self.x1 + tol)
            & (y >= self.y0 - tol)
            & (y <= self.y1 + tol)
        )


@dataclass(frozen=True)
class BasisVector:
    """Sparse nodal-basis evaluation: map basis index -> weight in [0, 1]."""

    entries: dict[int, float]

    def weight_sum(self) -> float:
        return float(sum(self.entries.values()))


class TriLocatorData(NamedTuple):
    """Plain-array view of a triangulation for the point-location kernels."""

    vertices: np.ndarray  # (p, 2)
    triangles: np.ndarray  # (m, 3) int32
    tinv: np.ndarray  # (m, 2, 2) inverse barycentric transforms
    anchor: np.ndarray  # (m, 2) third vertex of each triangle
    grid_x0: float
    grid_y0: float
    grid_dx: float
    grid_dy: float
    grid_nx: int
    grid_ny: int
    bin_ptr: np.ndarray  # (nx*ny + 1,) int64, CSR over bins
    bin_items: np.ndarray  # flat triangle indices, ascending within each bin


class EdgeIndexData(NamedTuple):
    """Unique mesh edges with the same uniform-grid binning as the locator."""

    coords: np.ndarray  # (E, 4): ax, ay, bx, by
    bin_ptr: np.ndarray
    bin_items: np.ndarray


def _build_bins(x0, y0, x1, y1, nx, ny, boxes):
    """CSR bin index over axis-aligned boxes (n, 4): xmin, ymin, xmax, ymax."""
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    ix0 = np.clip(((boxes[:, 0] - x0) / dx).astype(np.int64), 0, nx - 1)
    iy0 = np.clip(((boxes[:, 1] - y0) / dy).astype(np.int64), 0, ny - 1)
    ix1 = np.clip(((boxes[:, 2] - x0) / dx).astype(np.int64), 0, nx - 1)
    iy1 = np.clip(((boxes[:, 3] - y0) / dy).astype(np.int64), 0, ny - 1)
    bins = []
    items = []
    for k in range(boxes.shape[0]):
        for by in range(iy0[k], iy1[k] + 1):
            for bx in range(ix0[k], ix1[k] + 1):
                bins.append(by * nx + bx)
                items.append(k)
    bins = np.asarray(bins, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    order = np.lexsort((items, bins))
    bins = bins[order]
    items = items[order]
    ptr = np.zeros(nx * ny + 1, dtype=np.int64)
    np.add.at(ptr, bins + 1, 1)
    np.cumsum(ptr, out=ptr)
    return dx, dy, ptr, items


class TriMesh2D:
    """Conforming triangulation of the inflated arena.

    Parameters
    ----------
    vertices : (p, 2) array
        Node coordinates in cm.
    triangles : (m, 3) int array
        Vertex indices; every triangle must have positive signed area.
    arena : Rectangle
        The experimental arena proper (without margin).
    boundary_margin : float
        Distance by which the mesh extends beyond the arena.
    """

    def __init__(self, vertices, triangles, arena: Rectangle, boundary_margin: float):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int32)
        self.arena = arena
        self.boundary_margin = float(boundary_margin)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValidationError("vertices must be (p, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValidationError("triangles must be (m, 3)")
        areas = self.signed_areas()
        if np.any(areas <= 0):
            raise ValidationError("all triangles must have positive signed area")
        self._locator = None
        self._edge_index = None
        self._edge_vertex_pairs = None

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def triangle_count(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.cross(b - a, c - a)

    def locator(self) -> TriLocatorData:
        """Lazy plain-array locator (barycentric transforms + uniform bins)."""
        if self._locator is None:
            v = self.vertices
            t = self.triangles
            a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
            # columns of T are (a - c), (b - c); invert 2x2 per triangle
            t00 = a[:, 0] - c[:, 0]
            t01 = b[:, 0] - c[:, 0]
            t10 = a[:, 1] - c[:, 1]
            t11 = b[:, 1] - c[:, 1]
            det = t00 * t11 - t01 * t10
            tinv = np.empty((t.shape[0], 2, 2))
            tinv[:, 0, 0] = t11 / det
            tinv[:, 0, 1] = -t01 / det
            tinv[:, 1, 0] = -t10 / det
            tinv[:, 1, 1] = t00 / det
            x0, y0 = v.min(axis=0)
            x1, y1 = v.max(axis=0)
            m = t.shape[0]
            nx = max(1, int(np.sqrt(m / 2.0)))
            ny = nx
            boxes = np.stack(
                [
                    np.minimum(np.minimum(a[:, 0], b[:, 0]), c[:, 0]),
                    np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1]),
                    np.maximum(np.maximum(a[:, 0], b[:, 0]), c[:, 0]),
                    np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1]),
                ],
                axis=1,
            )
            dx, dy, ptr, items = _build_bins(x0, y0, x1, y1, nx, ny, boxes)
            self._locator = TriLocatorData(
                v, t, np.ascontiguousarray(tinv), np.ascontiguousarray(c),
                float(x0), float(y0), dx, dy, nx, ny, ptr, items,
            )
        return self._locator

    def edge_index(self) -> EdgeIndexData:
        """Lazy index of unique mesh edges for segment-crossing queries."""
        if self._edge_index is None:
            t = self.triangles
            pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            pairs = np.sort(pairs, axis=1)
            pairs = np.unique(pairs, axis=0)
            self._edge_vertex_pairs = pairs
            a = self.vertices[pairs[:, 0]]
            b = self.vertices[pairs[:, 1]]
            coords = np.ascontiguousarray(np.concatenate([a, b], axis=1))
            loc = self.locator()
            boxes = np.stack(
                [
                    np.minimum(a[:, 0], b[:, 0]),
                    np.minimum(a[:, 1], b[:, 1]),
                    np.maximum(a[:, 0], b[:, 0]),
                    np.maximum(a[:, 1], b[:, 1]),
                ],
                axis=1,
            )
            x1 = loc.grid_x0 + loc.grid_dx * loc.grid_nx
            y1 = loc.grid_y0 + loc.grid_dy * loc.grid_ny
            _, _, ptr, items = _build_bins(
                loc.grid_x0, loc.grid_y0, x1, y1, loc.grid_nx, loc.grid_ny, boxes
            )
            self._edge_index = EdgeIndexData(coords, ptr, items)
        return self._edge_index

    def barycentric(self, tri_idx, points):
        """Barycentric weights of `points` (k, 2) w.r.t. given triangle indices."""
        tri_idx = np.asarray(tri_idx)
        points = np.asarray(points, dtype=np.float64)
        loc = self.locator()
        rel = points - loc.anchor[tri_idx]
        lam = np.einsum("...ij,...j->...i", loc.tinv[tri_idx], rel)
        lam3 = 1.0 - lam[..., 0] - lam[..., 1]
        return np.stack([lam[..., 0], lam[..., 1], lam3], axis=-1)

    def locate_many(self, points) -> np.ndarray:
        """Containing triangle per point (-1 outside hull); smallest index wins."""
        from . import kernels

        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return kernels.locate_points(
            np.ascontiguousarray(points[:, 0]),
            np.ascontiguousarray(points[:, 1]),
            self.locator(),
            BARY_TOL,
        )

    def locate(self, point) -> int:
        idx = int(self.locate_many(np.asarray(point)[None, :])[0])
        if idx < 0:
            raise OutOfDomainError(f"point {tuple(point)} outside the planar mesh")
        return idx

    def basis(self, point) -> BasisVector:
        tri = self.locate(point)
        lam = self.barycentric(np.array([tri]), np.asarray(point, dtype=float)[None, :])[0]
        lam = np.clip(lam, 0.0, 1.0)
        lam /= lam.sum()
        verts = self.triangles[tri]
        return BasisVector(
            {int(v): float(w) for v, w in zip(verts, lam) if w > 1e-14}
        )


class CircularMesh:
    """Knot mesh on the circle [0, 2pi); arcs wrap around."""

    def __init__(self, knots):
        self.knots = np.asarray(knots, dtype=np.float64)
        if self.knots.ndim != 1 or self.knots.size < 3:
            raise ValidationError("circular mesh needs at least 3 knots")
        if np.any(np.diff(self.knots) <= 0):
            raise ValidationError("circular knots must be strictly increasing")
        if self.knots[0] < 0 or self.knots[-1] >= TWO_PI:
            raise ValidationError("circular knots must lie in [0, 2pi)")

    @property
    def knot_count(self) -> int:
        return self.knots.size

    def arc_lengths(self) -> np.ndarray:
        """Cell widths; cell i spans knots[i] -> knots[i+1], last wraps to knots[0]."""
        h = np.diff(self.knots)
        wrap = TWO_PI - self.knots[-1] + self.knots[0]
        return np.concatenate([h, [wrap]])

    def cell_of(self, theta):
        """Containing arc index for angles taken mod 2pi."""
        th = np.mod(np.asarray(theta, dtype=np.float64), TWO_PI)
        idx = np.searchsorted(self.knots, th, side="right") - 1
        # angles below the first knot belong to the wrap cell
        return np.where(idx < 0, self.knot_count - 1, idx)

    def interp_weights(self, theta):
        """Endpoint indices (k, 2) and linear weights (k, 2) of the containing arc."""
        th = np.mod(np.asarray(theta, dtype=np.float64), TWO_PI)
        scalar = th.ndim == 0
        th = np.atleast_1d(th)
        p = self.knot_count
        idx = np.asarray(self.cell_of(th))
        left = self.knots[idx]
        h = self.arc_lengths()[idx]
        # wrap-cell angles below knots[0] sit at 2pi + theta along the cell
        offs = th - left
        offs = np.where(offs < 0, offs + TWO_PI, offs)
        u = np.clip(offs / h, 0.0, 1.0)
        j = (idx + 1) % p
        indices = np.stack([idx, j], axis=-1)
        weights = np.stack([1.0 - u, u], axis=-1)
        if scalar:
            return indices[0], weights[0]
        return indices, weights

    def basis(self, theta) -> BasisVector:
        idx, w = self.interp_weights(float(theta))
        return BasisVector(
            {int(i): float(x) for i, x in zip(idx, w) if x > 1e-14}
        )


class TemporalMesh:
    """Knot mesh on [0, T]; first knot 0, last knot T."""

    def __init__(self, knots):
        self.knots = np.asarray(knots, dtype=np.float64)
        if self.knots.ndim != 1 or self.knots.size < 2:
            raise ValidationError("temporal mesh needs at least 2 knots")
        if np.any(np.diff(self.knots) <= 0):
            raise ValidationError("temporal knots must be strictly increasing")
        if self.knots[0] != 0.0:
            raise ValidationError("temporal mesh must start at 0")

    @property
    def knot_count(self) -> int:
        return self.knots.size

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def cell_of(self, times):
        t = np.asarray(times, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return np.clip(idx, 0, self.knot_count - 2)

    def interp_weights(self, times):
        t = np.asarray(times, dtype=np.float64)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < -1e-9) or np.any(t > self.duration + 1e-9):
            raise OutOfDomainError("time outside [0, T]")
        idx = np.asarray(self.cell_of(t))
        h = self.knots[idx + 1] - self.knots[idx]
        u = np.clip((t - self.knots[idx]) / h, 0.0, 1.0)
        indices = np.stack([idx, idx + 1], axis=-1)
        weights = np.stack([1.0 - u, u], axis=-1)
        if scalar:
            return indices[0], weights[0]
        return indices, weights

    def basis(self, t) -> BasisVector:
        idx, w = self.interp_weights(float(t))
        return BasisVector(
            {int(i): float(x) for i, x in zip(idx, w) if x > 1e-14}
        )


@dataclass(frozen=True)
class MassStiffness:
    """Lumped mass diagonal and piecewise-linear stiffness matrix."""

    mass_diag: np.ndarray
    stiffness: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.mass_diag.size


def build_tri_mesh(arena: Rectangle, max_edge: float, margin: float) -> TriMesh2D:
    """Structured triangulation of the arena inflated by `margin`.

    The inflated rectangle is split into an nx-by-ny grid of cells, each cut
    along one diagonal.  Cell sides are at most max_edge / sqrt(2), so every
    edge (including diagonals) is at most max_edge.
    """
    if max_edge <= 0:
        raise ValidationError("max_edge must be positive")
    if margin < 0:
        raise ValidationError("margin must be nonnegative")
    box = arena.inflate(margin)
    nx = max(1, int(np.ceil(box.width * np.sqrt(2.0) / max_edge)))
    ny = max(1, int(np.ceil(box.height * np.sqrt(2.0) / max_edge)))
    xs = np.linspace(box.x0, box.x1, nx + 1)
    ys = np.linspace(box.y0, box.y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.stack([gx.ravel(), gy.ravel()], axis=1)

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    tris = []
    for iy in range(ny):
        for ix in range(nx):
            v00 = vid(ix, iy)
            v10 = vid(ix + 1, iy)
            v01 = vid(ix, iy + 1)
            v11 = vid(ix + 1, iy + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return TriMesh2D(vertices, np.asarray(tris, dtype=np.int32), arena, margin)


def build_circular_mesh(p_theta: int) -> CircularMesh:
    """Equally spaced circular mesh with knots 2*pi*k/p."""
    if p_theta < 3:
        raise ValidationError("circular mesh needs p >= 3 knots")
    return CircularMesh(TWO_PI * np.arange(p_theta) / p_theta)


def eval_basis(mesh, point) -> BasisVector:
    """Nodal hat-function weights at `point` on any of the three mesh types."""
    return mesh.basis(point)


def locate(mesh: TriMesh2D, point) -> int:
    """Containing triangle index; on-edge ties break to the smallest index."""
    return mesh.locate(point)


def mass_stiffness(mesh) -> MassStiffness:
    """Lumped mass C and stiffness G for a mesh.

    The mass matrix is row-sum lumped, so C is diagonal with trace equal to
    the mesh measure (area, 2*pi, or T).  G always kills constants.
    """
    if isinstance(mesh, TriMesh2D):
        return _mass_stiffness_tri(mesh)
    if isinstance(mesh, CircularMesh):
        return _mass_stiffness_1d(mesh.knots, mesh.arc_lengths(), wrap=True)
    if isinstance(mesh, TemporalMesh):
        h = np.diff(mesh.knots)
        return _mass_stiffness_1d(mesh.knots, h, wrap=False)
    raise TypeError(f"unsupported mesh type {type(mesh)!r}")


def _mass_stiffness_tri(mesh: TriMesh2D) -> MassStiffness:
    p = mesh.vertex_count
    t = mesh.triangles
    v = mesh.vertices
    areas = mesh.signed_areas()
    mass = np.zeros(p)
    np.add.at(mass, t.ravel(), np.repeat(areas / 3.0, 3))

    # per-triangle gradients: K_ij = (b_i b_j + c_i c_j) / (4 area)
    x = v[t, 0]
    y = v[t, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    k_local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * areas[:, None, None]
    )
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    stiff = sp.coo_matrix((k_local.ravel(), (rows, cols)), shape=(p, p)).tocsr()
    stiff.sum_duplicates()
    return MassStiffness(mass, stiff)


def _mass_stiffness_1d(knots, h, wrap: bool) -> MassStiffness:
    p = knots.size
    ncell = h.size
    mass = np.zeros(p)
    rows, cols, vals = [], [], []
    for i in range(ncell):
        a = i
        bb = (i + 1) % p if wrap else i + 1
        mass[a] += h[i] / 2.0
        mass[bb] += h[i] / 2.0
        k = 1.0 / h[i]
        rows += [a, bb, a, bb]
        cols += [a, bb, bb, a]
        vals += [k, k, -k, -k]
    stiff = sp.coo_matrix((vals, (rows, cols)), shape=(p, p)).tocsr()
    stiff.sum_duplicates()
    return MassStiffness(mass, stiff)


def export_mesh_csv(mesh: TriMesh2D, vertices_path, triangles_path) -> None:
    """Write a triangulation as id,x,y and id,v0,v1,v2 CSV files."""
    with open(vertices_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(triangles_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "v0", "v1", "v2"])
        for i, tri in enumerate(mesh.triangles):
            w.writerow([i, int(tri[0]), int(tri[1]), int(tri[2])])


def import_mesh_csv(vertices_path, triangles_path, arena: Rectangle, margin: float) -> TriMesh2D:
    """Read a triangulation written by export_mesh_csv."""
    verts = np.loadtxt(vertices_path, delimiter=",", skiprows=1, ndmin=2)
    tris = np.loadtxt(triangles_path, delimiter=",", skiprows=1, ndmin=2, dtype=np.int64)
    order = np.argsort(verts[:, 0])
    verts = verts[order][:, 1:3]
    tris = tris[np.argsort(tris[:, 0])][:, 1:4]
    return TriMesh2D(verts, tris, arena, margin)
