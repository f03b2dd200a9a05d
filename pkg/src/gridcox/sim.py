"""Synthetic trajectories, latent fields, and Cox-process spike trains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .meshes import TWO_PI, CircularMesh, Rectangle, TemporalMesh, TriMesh2D
from .trajectory import (
    MODEL_KINDS,
    SegmentedPath,
    SessionData,
    SpikeTrain,
    _endpoint_basis,
)

# sub-split segments until the endpoint log-intensity gap is below this,
# making the linear-in-intensity thinning bound effectively exact
LOG_GAP = 0.05


@dataclass
class SyntheticTruth:
    """Known ground truth: latent weights on given meshes plus the intercept."""

    kind: str
    beta: float
    w_main: np.ndarray
    w_time: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")


def random_walk_trajectory(
    T: float,
    dt: float,
    arena: Rectangle,
    persistence: float,
    seed,
    speed: float = 15.0,
    theta_noise: float = 0.35,
) -> SessionData:
    """Reflected correlated random walk with heading-aligned head direction.

    `persistence` in [0, 1) blends the previous heading with a fresh uniform
    direction; 0 gives serially uncorrelated step directions.  Positions stay
    strictly inside the arena; samples are regular with spacing dt.
    """
    if dt <= 0:
        raise ValidationError("sample spacing dt must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(round(T / dt)) + 1
    times = np.arange(n) * dt
    xy = np.empty((n, 2))
    margin = min(arena.width, arena.height) * 1e-6
    xy[0] = [
        rng.uniform(arena.x0 + 0.25 * arena.width, arena.x1 - 0.25 * arena.width),
        rng.uniform(arena.y0 + 0.25 * arena.height, arena.y1 - 0.25 * arena.height),
    ]
    fresh = rng.uniform(0.0, TWO_PI, n)
    heading = fresh[0]
    headings = np.empty(n)
    step = speed * dt
    for k in range(1, n):
        z = persistence * np.exp(1j * heading) + (1.0 - persistence) * np.exp(1j * fresh[k])
        heading = float(np.angle(z))
        prop = xy[k - 1] + step * np.array([np.cos(heading), np.sin(heading)])
        for _ in range(8):
            if prop[0] < arena.x0 + margin:
                prop[0] = 2.0 * (arena.x0 + margin) - prop[0]
            elif prop[0] > arena.x1 - margin:
                prop[0] = 2.0 * (arena.x1 - margin) - prop[0]
            elif prop[1] < arena.y0 + margin:
                prop[1] = 2.0 * (arena.y0 + margin) - prop[1]
            elif prop[1] > arena.y1 - margin:
                prop[1] = 2.0 * (arena.y1 - margin) - prop[1]
            else:
                break
        prop[0] = np.clip(prop[0], arena.x0 + margin, arena.x1 - margin)
        prop[1] = np.clip(prop[1], arena.y0 + margin, arena.y1 - margin)
        d = prop - xy[k - 1]
        heading = float(np.arctan2(d[1], d[0]))
        headings[k] = heading
        xy[k] = prop
    headings[0] = headings[1]
    theta = np.mod(headings + theta_noise * rng.standard_normal(n), TWO_PI)
    return SessionData(times, xy, theta, np.zeros(n, dtype=bool))


def intensity_on_path(
    truth: SyntheticTruth,
    segs: SegmentedPath,
    tri: TriMesh2D,
    circ: CircularMesh | None = None,
    temporal: TemporalMesh | None = None,
):
    """Per-cm intensity exp(beta + basis . w) at both endpoints of each segment."""
    g0, g1 = _endpoint_log_intensity(truth, segs, tri, circ, temporal)
    return np.exp(g0), np.exp(g1)


def _endpoint_log_intensity(truth, segs, tri, circ, temporal):
    idx0, w0, idx1, w1 = _endpoint_basis(segs, tri, circ, truth.kind)
    if truth.w_main.size != (
        tri.vertex_count * (circ.knot_count if truth.kind in ("mxt", "mxtt") else 1)
    ):
        raise ValidationError("truth weights do not match the meshes")
    g0 = truth.beta + (truth.w_main[idx0] * w0).sum(axis=1)
    g1 = truth.beta + (truth.w_main[idx1] * w1).sum(axis=1)
    if truth.kind in ("m0t", "mxtt"):
        if temporal is None or truth.w_time is None:
            raise ValidationError("temporal kind needs a temporal mesh and weights")
        ti0, tw0 = temporal.interp_weights(segs.t0)
        ti1, tw1 = temporal.interp_weights(segs.t1)
        g0 = g0 + (truth.w_time[ti0] * tw0).sum(axis=1)
        g1 = g1 + (truth.w_time[ti1] * tw1).sum(axis=1)
    return g0, g1


def _thin_piecewise(t0, t1, lam0, lam1, rng) -> np.ndarray:
    """Thinning sampler for a piecewise-linear rate over time pieces."""
    dt = t1 - t0
    bound = np.maximum(lam0, lam1)
    counts = rng.poisson(bound * dt)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0)
    rows = np.repeat(np.arange(t0.size), counts)
    u = rng.random(total)
    t = t0[rows] + u * dt[rows]
    lam_t = lam0[rows] + u * (lam1[rows] - lam0[rows])
    accept = rng.random(total) * bound[rows] < lam_t
    times = np.sort(t[accept])
    if times.size > 1:
        times = times[np.concatenate([[True], np.diff(times) > 0])]
    return times


def simulate_spikes(
    truth: SyntheticTruth,
    segs: SegmentedPath,
    tri: TriMesh2D,
    circ: CircularMesh | None = None,
    temporal: TemporalMesh | None = None,
    seed=0,
) -> SpikeTrain:
    """Exact thinning of the Cox process along the segmented trajectory.

    The temporal rate on a segment is speed times the per-cm intensity, with
    log-intensity linear along the segment; pieces are sub-split until the
    endpoint log gap is below LOG_GAP so the linear interpolation of the
    intensity is effectively exact.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g0, g1 = _endpoint_log_intensity(truth, segs, tri, circ, temporal)
    if not (np.all(np.isfinite(g0)) and np.all(np.isfinite(g1))):
        raise ValidationError("non-finite intensity on the path")
    dt = segs.t1 - segs.t0
    ok = dt > 0
    speed = np.zeros_like(dt)
    speed[ok] = segs.lengths[ok] / dt[ok]

    nsub = np.maximum(1, np.ceil(np.abs(g1 - g0) / LOG_GAP).astype(np.int64))
    rows = np.repeat(np.arange(segs.count), nsub)
    before = np.concatenate([[0], np.cumsum(nsub)[:-1]])
    j = np.arange(rows.size) - np.repeat(before, nsub)
    f0 = j / nsub[rows]
    f1 = (j + 1) / nsub[rows]
    st0 = segs.t0[rows] + f0 * dt[rows]
    st1 = segs.t0[rows] + f1 * dt[rows]
    sg0 = g0[rows] + f0 * (g1[rows] - g0[rows])
    sg1 = g0[rows] + f1 * (g1[rows] - g0[rows])
    lam0 = np.exp(sg0) * speed[rows]
    lam1 = np.exp(sg1) * speed[rows]
    return SpikeTrain(_thin_piecewise(st0, st1, lam0, lam1, rng))


def replay_fig1(source, data: SessionData, seed, meshes: dict | None = None) -> SpikeTrain:
    """Simulate a spike train on the recorded trajectory under a fitted intensity.

    `source` is either a RateMapRaster (rate per unit time, bilinearly
    interpolated at the sample positions) or a PosteriorFit (per-cm intensity
    of the posterior-mode field times the speed along the path).
    """
    from .model import PosteriorFit
    from .trajectory import RateMapRaster, segment_path

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(source, RateMapRaster):
        lam = _raster_at(source, data.xy)
        t0 = data.times[:-1]
        t1 = data.times[1:]
        return SpikeTrain(_thin_piecewise(t0, t1, lam[:-1], lam[1:], rng))
    if isinstance(source, PosteriorFit):
        spec = source.spec
        segs = segment_path(data, spec.tri, spec.circ, spec.temporal)
        truth = SyntheticTruth(
            spec.kind, source.mode.beta, source.mode.w_main, source.mode.w_time
        )
        return simulate_spikes(truth, segs, spec.tri, spec.circ, spec.temporal, rng)
    raise ValidationError(f"unsupported intensity source {type(source)!r}")


def _raster_at(raster, xy):
    """Bilinear interpolation of a raster at points, clamped to the grid."""
    xs, ys = raster.xs, raster.ys
    x = np.clip(xy[:, 0], xs[0], xs[-1])
    y = np.clip(xy[:, 1], ys[0], ys[-1])
    ix = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
    iy = np.clip(np.searchsorted(ys, y, side="right") - 1, 0, ys.size - 2)
    fx = (x - xs[ix]) / (xs[ix + 1] - xs[ix])
    fy = (y - ys[iy]) / (ys[iy + 1] - ys[iy])
    z = raster.rate_per_time
    return (
        z[iy, ix] * (1 - fx) * (1 - fy)
        + z[iy, ix + 1] * fx * (1 - fy)
        + z[iy + 1, ix] * (1 - fx) * fy
        + z[iy + 1, ix + 1] * fx * fy
    )


def attach_spikes(data: SessionData, spike_times) -> SessionData:
    """Flag the sample at or after each spike time (binary flags collapse ties)."""
    flags = np.zeros(data.sample_count, dtype=bool)
    idx = np.searchsorted(data.times, np.asarray(spike_times), side="left")
    flags[np.clip(idx, 0, data.sample_count - 1)] = True
    return SessionData(data.times, data.xy, data.theta, flags)
