"""Session ingestion, prism segmentation, and path quadrature.

The trajectory through (position, head direction, time) is chopped so every
straight piece lies in exactly one spatial triangle, one circular arc, and
one temporal cell.  Trapezoidal quadrature along the pieces produces the
weight vectors/matrices that make the point-process likelihoods closed-form
in the latent weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import OutOfDomainError, ValidationError
from .meshes import TWO_PI, BARY_TOL, CircularMesh, TemporalMesh, TriMesh2D

MODEL_KINDS = ("m0", "m0t", "mxt", "mxtt")

_PARAM_TOL = 1e-12


@dataclass
class SessionData:
    """Timestamped positions, head directions and spike flags."""

    times: np.ndarray
    xy: np.ndarray
    theta: np.ndarray
    spike_flags: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.xy = np.asarray(self.xy, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.spike_flags = np.asarray(self.spike_flags, dtype=bool)
        n = self.times.size
        if self.xy.shape != (n, 2) or self.theta.shape != (n,) or self.spike_flags.shape != (n,):
            raise ValidationError("session arrays have inconsistent lengths")
        if n < 2:
            raise ValidationError("session needs at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("sample times must be strictly increasing")
        if np.any((self.theta < 0) | (self.theta >= TWO_PI)):
            raise ValidationError("head directions must lie in [0, 2pi)")

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    @property
    def sample_count(self) -> int:
        return self.times.size

    def gap_ratio(self) -> float:
        """Max/min inter-sample spacing (reported, not enforced)."""
        gaps = np.diff(self.times)
        return float(gaps.max() / gaps.min())

    def polyline_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.xy, axis=0), axis=1).sum())


@dataclass
class SpikeTrain:
    """Ordered firing-event times."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValidationError("spike times must be strictly increasing")

    @property
    def count(self) -> int:
        return self.times.size


def load_session(path):
    """Read a time,x,y,theta,spike CSV into SessionData + SpikeTrain.

    Malformed rows, non-monotone times and out-of-range angles raise
    ValidationError with the offending row number (1-based, header is row 1).
    """
    times, xs, ys, thetas, spikes = [], [], [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["time", "x", "y", "theta", "spike"]:
            raise ValidationError(f"{path}: expected header time,x,y,theta,spike")
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ValidationError(f"{path}: row {rownum}: expected 5 fields, got {len(row)}")
            try:
                t, x, y, th = (float(v) for v in row[:4])
                flag = int(row[4])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {rownum}: malformed value ({exc})") from exc
            if times and t <= times[-1]:
                raise ValidationError(f"{path}: row {rownum}: non-monotone time {t}")
            if not (0.0 <= th < TWO_PI):
                raise ValidationError(f"{path}: row {rownum}: theta {th} outside [0, 2pi)")
            if flag not in (0, 1):
                raise ValidationError(f"{path}: row {rownum}: spike flag must be 0 or 1")
            times.append(t)
            xs.append(x)
            ys.append(y)
            thetas.append(th)
            spikes.append(flag)
    data = SessionData(
        np.asarray(times), np.column_stack([xs, ys]), np.asarray(thetas),
        np.asarray(spikes, dtype=bool),
    )
    train = SpikeTrain(data.times[data.spike_flags])
    return data, train


def signed_angle_diff(a, b):
    """Shortest signed arc from a to b; exact antipodes break toward +pi."""
    d = np.mod(np.asarray(b) - np.asarray(a) + np.pi, TWO_PI) - np.pi
    return np.where(np.isclose(d, -np.pi), np.pi, d)


def covariates_at(data: SessionData, times):
    """Linear interpolation of (x, y, theta) at arbitrary session times."""
    t = np.asarray(times, dtype=np.float64)
    x = np.interp(t, data.times, data.xy[:, 0])
    y = np.interp(t, data.times, data.xy[:, 1])
    idx = np.clip(np.searchsorted(data.times, t, side="right") - 1, 0, data.sample_count - 2)
    h = data.times[idx + 1] - data.times[idx]
    u = np.clip((t - data.times[idx]) / h, 0.0, 1.0)
    dth = signed_angle_diff(data.theta[idx], data.theta[idx + 1])
    th = np.mod(data.theta[idx] + u * dth, TWO_PI)
    return np.column_stack([x, y]), th


@dataclass
class SegmentedPath:
    """Trajectory pieces, each inside one (triangle, arc, time-cell) prism."""

    t0: np.ndarray
    t1: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    th0: np.ndarray
    th1: np.ndarray
    lengths: np.ndarray
    tri: np.ndarray
    arc: np.ndarray
    tcell: np.ndarray

    @property
    def count(self) -> int:
        return self.lengths.size

    def total_length(self) -> float:
        return float(self.lengths.sum())

    def boundary_times(self) -> np.ndarray:
        """Sorted unique segment boundary times, including 0 and T endpoints."""
        return np.unique(np.concatenate([self.t0, self.t1]))

    def in_window(self, a: float, b: float) -> np.ndarray:
        """Mask of segments wholly inside [a, b]."""
        eps = 1e-9 * max(1.0, abs(b))
        return (self.t0 >= a - eps) & (self.t1 <= b + eps)


def _ragged_ranges(starts, counts):
    """Concatenate arange(start, start+count) over rows."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rows = np.repeat(np.arange(starts.size), counts)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offs = np.arange(total) - np.repeat(before, counts)
    return rows, np.repeat(starts, counts) + offs


def _circular_crossings(th0, dth, knots):
    """Per-pair params where theta(u) = th0 + u*dth hits a knot angle.

    Returns (pair_row, u).  Uses the unwrapped interval between the two
    endpoint angles; |dth| <= pi so at most two 2*pi branches contribute.
    """
    lo = np.minimum(th0, th0 + dth)
    hi = np.maximum(th0, th0 + dth)
    rows_all, u_all = [], []
    m0 = np.floor(lo / TWO_PI)
    for m in (m0, m0 + 1.0):
        a = lo - TWO_PI * m
        b = hi - TWO_PI * m
        i0 = np.searchsorted(knots, a, side="right")
        i1 = np.searchsorted(knots, b, side="left")
        counts = np.maximum(i1 - i0, 0)
        rows, kidx = _ragged_ranges(i0, counts)
        if rows.size == 0:
            continue
        c = knots[kidx] + TWO_PI * np.repeat(m, counts)
        u = (c - th0[rows]) / dth[rows]
        keep = (u > _PARAM_TOL) & (u < 1.0 - _PARAM_TOL)
        rows_all.append(rows[keep])
        u_all.append(u[keep])
    if rows_all:
        return np.concatenate(rows_all), np.concatenate(u_all)
    return np.empty(0, dtype=np.int64), np.empty(0)


def _time_crossings(t0, t1, knots):
    i0 = np.searchsorted(knots, t0, side="right")
    i1 = np.searchsorted(knots, t1, side="left")
    counts = np.maximum(i1 - i0, 0)
    rows, kidx = _ragged_ranges(i0, counts)
    if rows.size == 0:
        return rows, np.empty(0)
    u = (knots[kidx] - t0[rows]) / (t1[rows] - t0[rows])
    keep = (u > _PARAM_TOL) & (u < 1.0 - _PARAM_TOL)
    return rows[keep], u[keep]


def segment_path(
    data: SessionData,
    tri: TriMesh2D,
    circ: CircularMesh | None = None,
    temporal: TemporalMesh | None = None,
    extra_time_knots=None,
) -> SegmentedPath:
    """Split the sampled trajectory at triangle edges, arc knots and time knots.

    Zero-displacement sample pairs are dropped (they carry no travel distance
    and, with the degenerate metric, no firing intensity).  `extra_time_knots`
    adds split times (e.g. cross-validation interval edges) without affecting
    the recorded temporal cell indices.
    """
    if data.sample_count < 2:
        raise ValidationError("zero-length session")
    xy = data.xy
    if not np.all(tri.arena.inflate(tri.boundary_margin).contains(xy[:, 0], xy[:, 1])):
        raise OutOfDomainError("session positions fall outside the mesh extent")
    p0 = xy[:-1]
    p1 = xy[1:]
    pairlen = np.linalg.norm(p1 - p0, axis=1)
    keep = pairlen > 0.0
    p0, p1 = p0[keep], p1[keep]
    pairlen = pairlen[keep]
    t0 = data.times[:-1][keep]
    t1 = data.times[1:][keep]
    th0 = data.theta[:-1][keep]
    dth = signed_angle_diff(data.theta[:-1], data.theta[1:])[keep]
    npair = p0.shape[0]
    if npair == 0:
        raise ValidationError("session has no displacement")

    rows_parts = [np.arange(npair), np.arange(npair)]
    u_parts = [np.zeros(npair), np.ones(npair)]

    flat, offsets = kernels.spatial_crossings(
        np.ascontiguousarray(p0[:, 0]), np.ascontiguousarray(p0[:, 1]),
        np.ascontiguousarray(p1[:, 0]), np.ascontiguousarray(p1[:, 1]),
        tri.locator(), tri.edge_index(), _PARAM_TOL,
    )
    rows_parts.append(np.repeat(np.arange(npair), np.diff(offsets)))
    u_parts.append(flat)

    if circ is not None:
        r, u = _circular_crossings(th0, dth, circ.knots)
        rows_parts.append(r)
        u_parts.append(u)

    tknots = []
    if temporal is not None:
        tknots.append(temporal.knots)
    if extra_time_knots is not None:
        tknots.append(np.asarray(extra_time_knots, dtype=np.float64))
    if tknots:
        r, u = _time_crossings(t0, t1, np.unique(np.concatenate(tknots)))
        rows_parts.append(r)
        u_parts.append(u)

    rows = np.concatenate(rows_parts)
    us = np.concatenate(u_parts)
    order = np.lexsort((us, rows))
    rows = rows[order]
    us = us[order]
    # collapse parameters closer than the tolerance, keeping the later one
    same = rows[:-1] == rows[1:]
    close = us[1:] - us[:-1] <= _PARAM_TOL
    drop = np.concatenate([same & close, [False]])
    rows = rows[~drop]
    us = us[~drop]

    adj = (rows[:-1] == rows[1:])
    seg_pair = rows[:-1][adj]
    u0 = us[:-1][adj]
    u1 = us[1:][adj]

    dt = t1 - t0
    seg_t0 = t0[seg_pair] + u0 * dt[seg_pair]
    seg_t1 = t0[seg_pair] + u1 * dt[seg_pair]
    d = p1 - p0
    seg_p0 = p0[seg_pair] + u0[:, None] * d[seg_pair]
    seg_p1 = p0[seg_pair] + u1[:, None] * d[seg_pair]
    seg_th0 = np.mod(th0[seg_pair] + u0 * dth[seg_pair], TWO_PI)
    seg_th1 = np.mod(th0[seg_pair] + u1 * dth[seg_pair], TWO_PI)
    seg_len = (u1 - u0) * pairlen[seg_pair]

    mid = 0.5 * (seg_p0 + seg_p1)
    tri_idx = kernels.locate_points(
        np.ascontiguousarray(mid[:, 0]), np.ascontiguousarray(mid[:, 1]),
        tri.locator(), BARY_TOL,
    )
    if np.any(tri_idx < 0):
        raise OutOfDomainError("segment midpoint outside the planar mesh")

    if circ is not None:
        th_mid = np.mod(th0[seg_pair] + 0.5 * (u0 + u1) * dth[seg_pair], TWO_PI)
        arc_idx = np.asarray(circ.cell_of(th_mid), dtype=np.int64)
    else:
        arc_idx = np.full(seg_pair.size, -1, dtype=np.int64)

    if temporal is not None:
        tcell = np.asarray(temporal.cell_of(0.5 * (seg_t0 + seg_t1)), dtype=np.int64)
    else:
        tcell = np.full(seg_pair.size, -1, dtype=np.int64)

    return SegmentedPath(
        seg_t0, seg_t1, seg_p0, seg_p1, seg_th0, seg_th1, seg_len,
        np.asarray(tri_idx, dtype=np.int64), arc_idx, tcell,
    )


def thin_temporal_knots(segs: SegmentedPath, target_spacing: float) -> TemporalMesh:
    """Greedy subsequence of segment boundary times with gaps >= target_spacing.

    Retains 0 and T.  Re-run segment_path with the result so every segment
    lies in one temporal cell.
    """
    if target_spacing <= 0:
        raise ValidationError("target spacing must be positive")
    bt = segs.boundary_times()
    chosen = [bt[0]]
    for t in bt[1:]:
        if t - chosen[-1] >= target_spacing:
            chosen.append(t)
    if chosen[-1] < bt[-1]:
        chosen.append(bt[-1])
    return TemporalMesh(np.asarray(chosen))


@dataclass
class IntegrationWeights:
    """Quadrature weights and observation basis matrices for one model kind.

    `b` is the quadrature vector (non-temporal kinds); `B` the p_T-by-p_main
    quadrature matrix (temporal kinds).  `a_obs` maps block name ('main',
    'time') to the sparse basis matrix at the spike covariates.
    """

    kind: str
    b: np.ndarray | None
    B: sp.csr_matrix | None
    a_obs: dict[str, sp.csr_matrix]
    path_length: float
    n_spikes: int
    p_main: int
    p_time: int

    def quad_vector(self) -> np.ndarray:
        """Column-summed quadrature vector (collapses B when temporal)."""
        if self.b is not None:
            return self.b
        return np.asarray(self.B.sum(axis=0)).ravel()


def _endpoint_basis(segs, tri, circ, kind):
    """Main-block basis indices/weights at both endpoints of every segment.

    Returns (idx0, w0, idx1, w1) arrays of shape (N, k) with k = 3 for the
    spatial field and 6 for the space-direction interaction.
    """
    lam0 = tri.barycentric(segs.tri, segs.p0)
    lam1 = tri.barycentric(segs.tri, segs.p1)
    vert = tri.triangles[segs.tri].astype(np.int64)
    if kind in ("m0", "m0t"):
        return vert, lam0, vert, lam1
    ci0, cw0 = circ.interp_weights(segs.th0)
    ci1, cw1 = circ.interp_weights(segs.th1)
    p_omega = tri.vertex_count
    idx0 = (ci0[:, :, None] * p_omega + vert[:, None, :]).reshape(-1, 6)
    idx1 = (ci1[:, :, None] * p_omega + vert[:, None, :]).reshape(-1, 6)
    w0 = (cw0[:, :, None] * lam0[:, None, :]).reshape(-1, 6)
    w1 = (cw1[:, :, None] * lam1[:, None, :]).reshape(-1, 6)
    return idx0, w0, idx1, w1


def _spike_basis(kind, tri, circ, temporal, spike_xy, spike_theta, spike_times):
    """Sparse observation matrices at the spike covariates, per block."""
    n = spike_xy.shape[0]
    blocks: dict[str, sp.csr_matrix] = {}
    tri_idx = kernels.locate_points(
        np.ascontiguousarray(spike_xy[:, 0]), np.ascontiguousarray(spike_xy[:, 1]),
        tri.locator(), BARY_TOL,
    )
    if np.any(tri_idx < 0):
        raise OutOfDomainError("spike position outside the planar mesh")
    lam = tri.barycentric(tri_idx, spike_xy)
    vert = tri.triangles[tri_idx].astype(np.int64)
    p_omega = tri.vertex_count
    if kind in ("m0", "m0t"):
        rows = np.repeat(np.arange(n), 3)
        blocks["main"] = sp.csr_matrix(
            (lam.ravel(), (rows, vert.ravel())), shape=(n, p_omega)
        )
    else:
        ci, cw = circ.interp_weights(spike_theta)
        idx = (ci[:, :, None] * p_omega + vert[:, None, :]).reshape(-1, 6)
        w = (cw[:, :, None] * lam[:, None, :]).reshape(-1, 6)
        rows = np.repeat(np.arange(n), 6)
        blocks["main"] = sp.csr_matrix(
            (w.ravel(), (rows, idx.ravel())), shape=(n, p_omega * circ.knot_count)
        )
    if kind in ("m0t", "mxtt"):
        ti, tw = temporal.interp_weights(spike_times)
        rows = np.repeat(np.arange(n), 2)
        blocks["time"] = sp.csr_matrix(
            (tw.ravel(), (rows, ti.ravel())), shape=(n, temporal.knot_count)
        )
    for mat in blocks.values():
        mat.sum_duplicates()
    return blocks


def integration_weights(
    segs: SegmentedPath,
    kind: str,
    tri: TriMesh2D,
    circ: CircularMesh | None = None,
    temporal: TemporalMesh | None = None,
    spikes: SpikeTrain | None = None,
    session: SessionData | None = None,
    mask=None,
) -> IntegrationWeights:
    """Trapezoidal quadrature weights and spike basis matrices for a model kind.

    Each segment contributes |L|/2 times the basis evaluations at both of its
    endpoints.  `mask` restricts to a subset of segments (cross-validation);
    spikes are then restricted to the covered time intervals by the caller.
    """
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}")
    if kind in ("mxt", "mxtt") and circ is None:
        raise ValidationError(f"model {kind} requires a circular mesh")
    if kind in ("m0t", "mxtt") and temporal is None:
        raise ValidationError(f"model {kind} requires a temporal mesh")

    sub = segs
    if mask is not None:
        sub = SegmentedPath(
            segs.t0[mask], segs.t1[mask], segs.p0[mask], segs.p1[mask],
            segs.th0[mask], segs.th1[mask], segs.lengths[mask],
            segs.tri[mask], segs.arc[mask], segs.tcell[mask],
        )

    p_main = tri.vertex_count if kind in ("m0", "m0t") else tri.vertex_count * circ.knot_count
    p_time = temporal.knot_count if kind in ("m0t", "mxtt") else 0
    idx0, w0, idx1, w1 = _endpoint_basis(sub, tri, circ, kind)
    half = 0.5 * sub.lengths

    if kind in ("m0", "mxt"):
        b = np.zeros(p_main)
        np.add.at(b, idx0, half[:, None] * w0)
        np.add.at(b, idx1, half[:, None] * w1)
        bmat = None
    else:
        ti0, tw0 = temporal.interp_weights(sub.t0)
        ti1, tw1 = temporal.interp_weights(sub.t1)
        k = idx0.shape[1]
        rows = np.concatenate([
            np.repeat(ti0, k, axis=1).ravel(), np.repeat(ti1, k, axis=1).ravel(),
        ])
        cols = np.concatenate([
            np.tile(idx0, (1, 2)).ravel(), np.tile(idx1, (1, 2)).ravel(),
        ])
        vals = np.concatenate([
            (half[:, None, None] * tw0[:, :, None] * w0[:, None, :]).ravel(),
            (half[:, None, None] * tw1[:, :, None] * w1[:, None, :]).ravel(),
        ])
        bmat = sp.csr_matrix((vals, (rows, cols)), shape=(p_time, p_main))
        bmat.sum_duplicates()
        b = None

    n_spikes = 0
    a_obs: dict[str, sp.csr_matrix] = {}
    if spikes is not None and spikes.count:
        if session is None:
            raise ValidationError("spike covariates require the session record")
        sxy, sth = covariates_at(session, spikes.times)
        a_obs = _spike_basis(kind, tri, circ, temporal, sxy, sth, spikes.times)
        n_spikes = spikes.count

    return IntegrationWeights(
        kind, b, bmat, a_obs, float(sub.lengths.sum()), n_spikes, p_main, p_time
    )


@dataclass
class RateMapRaster:
    """Kernel-smoothed rate maps on a rectangular grid.

    `rate_per_time` is spikes per second at each location, `rate_per_distance`
    spikes per cm travelled, and `speed` the smoothed expected speed; the first
    factors exactly into the product of the other two.
    """

    xs: np.ndarray
    ys: np.ndarray
    rate_per_time: np.ndarray
    rate_per_distance: np.ndarray
    speed: np.ndarray


def rate_map_kernel(
    data: SessionData,
    spikes: SpikeTrain,
    h: float,
    grid_shape: tuple[int, int],
    bounds=None,
) -> RateMapRaster:
    """Gaussian-kernel firing rate maps over a (nx, ny) raster.

    The occupancy (time) and travel (line) integrals along the trajectory are
    approximated by the trapezoidal rule over the samples; the spike sum uses
    the interpolated spike positions.  Where the occupancy is numerically
    zero the outputs are set to zero.
    """
    if h <= 0:
        raise ValidationError("bandwidth h must be positive")
    nx, ny = grid_shape
    if bounds is None:
        x0, y0 = data.xy.min(axis=0)
        x1, y1 = data.xy.max(axis=0)
    else:
        x0, y0, x1, y1 = bounds
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])

    gaps = np.diff(data.times)
    w_time = np.zeros(data.sample_count)
    w_time[:-1] += gaps / 2.0
    w_time[1:] += gaps / 2.0
    steps = np.linalg.norm(np.diff(data.xy, axis=0), axis=1)
    w_line = np.zeros(data.sample_count)
    w_line[:-1] += steps / 2.0
    w_line[1:] += steps / 2.0

    if spikes.count:
        spike_xy, _ = covariates_at(data, spikes.times)
    else:
        spike_xy = np.empty((0, 2))

    norm = 1.0 / (2.0 * np.pi * h * h)
    inv2h2 = 1.0 / (2.0 * h * h)
    num = np.empty(grid.shape[0])
    time_int = np.empty(grid.shape[0])
    line_int = np.empty(grid.shape[0])
    chunk = max(1, int(2e7 / max(1, data.sample_count)))
    for a in range(0, grid.shape[0], chunk):
        g = grid[a:a + chunk]
        d2 = (
            (g[:, None, 0] - data.xy[None, :, 0]) ** 2
            + (g[:, None, 1] - data.xy[None, :, 1]) ** 2
        )
        k = norm * np.exp(-d2 * inv2h2)
        time_int[a:a + chunk] = k @ w_time
        line_int[a:a + chunk] = k @ w_line
        if spike_xy.shape[0]:
            d2s = (
                (g[:, None, 0] - spike_xy[None, :, 0]) ** 2
                + (g[:, None, 1] - spike_xy[None, :, 1]) ** 2
            )
            num[a:a + chunk] = norm * np.exp(-d2s * inv2h2).sum(axis=1)
        else:
            num[a:a + chunk] = 0.0

    with np.errstate(divide="ignore", invalid="ignore"):
        lam_time = np.where(time_int > 0, num / time_int, 0.0)
        lam_dist = np.where(line_int > 0, num / line_int, 0.0)
        speed = np.where(time_int > 0, line_int / time_int, 0.0)
    shape = (ny, nx)
    return RateMapRaster(
        xs, ys, lam_time.reshape(shape), lam_dist.reshape(shape), speed.reshape(shape)
    )
