"""Command-line front end.

Subcommands: config, check-variance, ratemap, simulate, fit, crossval.
Exit codes: 0 success, 2 validation error, 3 convergence failure,
4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import scipy

from . import __version__, crossval, meshes, model, sim, spde, trajectory
from .config import RunConfig
from .errors import ConvergenceError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_CHECK_FAILED = 4


def _write_manifest(outdir, command, config: RunConfig, seeds: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config.digest(),
        "seeds": seeds,
        "versions": {
            "gridcox": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _arena_from(config: RunConfig, data: trajectory.SessionData) -> meshes.Rectangle:
    spec = config.section("meshes")["arena"]
    if spec is not None:
        return meshes.Rectangle(*spec)
    x0, y0 = data.xy.min(axis=0)
    x1, y1 = data.xy.max(axis=0)
    return meshes.Rectangle(float(x0), float(y0), float(x1), float(y1))


def _build_meshes(config: RunConfig, arena: meshes.Rectangle, kind: str,
                  data: trajectory.SessionData):
    mcfg = config.section("meshes")
    margin = mcfg["margin"]
    if margin is None:
        margin = 0.2 * arena.width
    tri = meshes.build_tri_mesh(arena, mcfg["max_edge"], margin)
    circ = meshes.build_circular_mesh(mcfg["p_theta"])
    temporal = None
    if kind in ("m0t", "mxtt"):
        segs = trajectory.segment_path(data, tri, circ)
        temporal = trajectory.thin_temporal_knots(segs, mcfg["temporal_spacing"])
    return tri, circ, temporal


def _save_fit(outdir, fit: model.PosteriorFit, config: RunConfig) -> None:
    os.makedirs(outdir, exist_ok=True)
    hyper = {}
    for name, params in fit.hyper.blocks().items():
        hyper[name] = {
            "domain": params.domain, "rho": params.rho, "s": params.s,
            "phi": params.phi, "tau": params.tau, "kappa": params.kappa,
        }
    with open(os.path.join(outdir, "hyper.json"), "w") as f:
        json.dump({"hyper": hyper, "priors": config.section("priors")}, f,
                  indent=2, sort_keys=True)
    with open(os.path.join(outdir, "latent.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "index", "value"])
        w.writerow(["beta", 0, repr(fit.mode.beta)])
        for i, v in enumerate(fit.mode.w_main):
            w.writerow(["w_main", i, repr(float(v))])
        if fit.mode.w_time is not None:
            for i, v in enumerate(fit.mode.w_time):
                w.writerow(["w_time", i, repr(float(v))])
    report = {
        "kind": fit.spec.kind,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "log_posterior": fit.log_posterior,
        "log_likelihood_at_mode": fit.log_likelihood_at_mode,
        "laplace_log_marginal": fit.laplace_log_marginal,
        "config_hash": config.digest(),
    }
    with open(os.path.join(outdir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def cmd_config(args) -> int:
    if args.action == "print-defaults":
        print(RunConfig().dump())
        return EXIT_OK
    raise ValidationError(f"unknown config action {args.action!r}")


def cmd_check_variance(args) -> int:
    """Closed-form variances against the spectral quadrature/summation oracle."""
    domains = args.domains.split(",")
    phis = [float(v) for v in args.phis.split(",")]
    kappas = [float(v) for v in args.kappas.split(",")]
    rows = []
    worst = 0.0
    for dom in domains:
        for phi in phis:
            for kappa in kappas:
                closed = spde.marginal_variance(dom, kappa, phi, 1.0)
                oracle = spde.marginal_variance_oracle(dom, kappa, phi, 1.0)
                rel = abs(closed - oracle) / abs(oracle)
                worst = max(worst, rel)
                rows.append((dom, phi, kappa, closed, oracle, rel))
    print(f"{'domain':8} {'phi':>6} {'kappa':>8} {'closed':>14} {'oracle':>14} {'rel_err':>10}")
    for dom, phi, kappa, closed, oracle, rel in rows:
        print(f"{dom:8} {phi:6.2f} {kappa:8.4f} {closed:14.8e} {oracle:14.8e} {rel:10.2e}")
    print(f"worst relative error: {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst <= args.tol else EXIT_CHECK_FAILED


def cmd_ratemap(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    data, spikes = trajectory.load_session(args.session)
    raster = trajectory.rate_map_kernel(data, spikes, args.h, (args.nx, args.ny))
    os.makedirs(args.out, exist_ok=True)
    names = {
        "rate_per_time": raster.rate_per_time,
        "rate_per_distance": raster.rate_per_distance,
        "speed": raster.speed,
    }
    for name, grid in names.items():
        with open(os.path.join(args.out, f"{name}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "value"])
            for iy in range(raster.ys.size):
                for ix in range(raster.xs.size):
                    w.writerow([
                        repr(float(raster.xs[ix])), repr(float(raster.ys[iy])),
                        repr(float(grid[iy, ix])),
                    ])
    with open(os.path.join(args.out, "ratemap_meta.json"), "w") as f:
        json.dump({"bandwidth_cm": args.h, "nx": args.nx, "ny": args.ny,
                   "n_spikes": spikes.count}, f, indent=2)
    _write_manifest(args.out, "ratemap", config, {"seed": None})
    return EXIT_OK


def _truth_from_file(path, seed):
    with open(path) as f:
        doc = json.load(f)
    for key in ("kind", "beta", "arena", "mesh", "hyper"):
        if key not in doc:
            raise ValidationError(f"{path}: missing truth key {key!r}")
    kind = doc["kind"]
    arena = meshes.Rectangle(*doc["arena"])
    mesh_cfg = doc["mesh"]
    tri = meshes.build_tri_mesh(arena, mesh_cfg["max_edge"], mesh_cfg["margin"])
    circ = meshes.build_circular_mesh(mesh_cfg.get("p_theta", 12))
    rng = np.random.default_rng(doc.get("field_seed", seed))

    def draw_block(domain, ms, spec):
        params = spde.normalize_tau(spde.SpdeParams(
            domain, spec["rho"], spec["s"], spec.get("phi", 1.0)
        ))
        q = spde.assemble_precision(ms, params)
        return spde.sample_gmrf(q, rng)

    h = doc["hyper"]
    if kind in ("mxt", "mxtt"):
        q_om = spde.assemble_precision(
            meshes.mass_stiffness(tri),
            spde.normalize_tau(spde.SpdeParams("plane", h["spatial"]["rho"],
                                               h["spatial"]["s"],
                                               h["spatial"].get("phi", 1.0))),
        )
        q_th = spde.assemble_precision(
            meshes.mass_stiffness(circ),
            spde.normalize_tau(spde.SpdeParams("circle", h["directional"]["rho"],
                                               h["directional"]["s"], 1.0)),
        )
        w_main = spde.sample_gmrf(spde.kron_precision(q_th, q_om), rng)
    else:
        w_main = draw_block("plane", meshes.mass_stiffness(tri), h["spatial"])
    truth = sim.SyntheticTruth(kind, float(doc["beta"]), w_main)
    return doc, truth, arena, tri, circ, mesh_cfg


def cmd_simulate(args) -> int:
    config = RunConfig()
    doc, truth, arena, tri, circ, mesh_cfg = _truth_from_file(args.truth, args.seed)
    traj_cfg = doc.get("trajectory", {})
    data = sim.random_walk_trajectory(
        args.T, args.dt, arena,
        persistence=traj_cfg.get("persistence", 0.85),
        seed=args.seed,
        speed=traj_cfg.get("speed", 15.0),
        theta_noise=traj_cfg.get("theta_noise", 0.35),
    )
    temporal = None
    if truth.kind in ("m0t", "mxtt"):
        segs0 = trajectory.segment_path(data, tri, circ)
        temporal = trajectory.thin_temporal_knots(
            segs0, mesh_cfg.get("temporal_spacing", 5.0)
        )
        rng = np.random.default_rng(doc.get("field_seed", args.seed))
        # redraw blocks in a fixed order so the temporal field is reproducible
        truth = sim.SyntheticTruth(
            truth.kind, truth.beta, truth.w_main,
            spde.sample_gmrf(spde.assemble_precision(
                meshes.mass_stiffness(temporal),
                spde.normalize_tau(spde.SpdeParams(
                    "line", doc["hyper"]["temporal"]["rho"],
                    doc["hyper"]["temporal"]["s"], 1.0)),
            ), rng),
        )
    segs = trajectory.segment_path(data, tri, circ, temporal)
    spikes = sim.simulate_spikes(truth, segs, tri, circ, temporal, seed=args.seed + 1)
    flagged = sim.attach_spikes(data, spikes.times)
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(outdir, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time", "x", "y", "theta", "spike"])
        for i in range(flagged.sample_count):
            w.writerow([
                repr(float(flagged.times[i])), repr(float(flagged.xy[i, 0])),
                repr(float(flagged.xy[i, 1])), repr(float(flagged.theta[i])),
                int(flagged.spike_flags[i]),
            ])
    _write_manifest(outdir, "simulate", config, {"seed": args.seed})
    print(f"wrote {args.out}: {flagged.sample_count} samples, "
          f"{int(flagged.spike_flags.sum())} flagged spikes "
          f"({spikes.count} events before flag collapse)")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    data, spikes = trajectory.load_session(args.session)
    arena = _arena_from(config, data)
    tri, circ, temporal = _build_meshes(config, arena, args.model, data)
    spec = model.ModelSpec(args.model, tri, circ, temporal, config.prior_config())
    segs = trajectory.segment_path(data, tri, circ, temporal)
    iw = trajectory.integration_weights(
        segs, args.model, tri, circ, temporal, spikes=spikes, session=data
    )
    inf = config.section("inference")
    fit = model.optimize_hyper(
        spec, iw, config.search_config(args.seed),
        tol=inf["newton_tol"], max_iter=inf["newton_max_iter"],
    )
    _save_fit(args.out, fit, config)
    _write_manifest(args.out, "fit", config, {"seed": args.seed})
    print(f"fit {args.model}: laplace={fit.laplace_log_marginal:.4f} "
          f"iterations={fit.iterations}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    data, spikes = trajectory.load_session(args.session)
    kinds = args.models.split(",")
    arena = _arena_from(config, data)
    needs_temporal = any(k in ("m0t", "mxtt") for k in kinds)
    tri, circ, temporal = _build_meshes(
        config, arena, "m0t" if needs_temporal else "m0", data
    )
    prior = config.prior_config()
    specs = {
        k: model.ModelSpec(k, tri, circ,
                           temporal if k in ("m0t", "mxtt") else None, prior)
        for k in kinds
    }
    inf = config.section("inference")
    cv_config = crossval.CrossValConfig(
        taus=tuple(float(v) for v in args.tau.split(",")),
        k_draws=args.K if args.K else inf["k_draws"],
        j_permutations=args.J if args.J else inf["j_permutations"],
        seed=args.seed,
        search=config.search_config(args.seed),
        newton_tol=inf["newton_tol"],
        newton_max_iter=inf["newton_max_iter"],
    )
    cv = crossval.CrossValidator(data, spikes, specs, cv_config)
    scores = cv.run(threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    if len(kinds) > 1:
        rows = crossval.compare_scores(
            scores, kinds[0], cv_config.j_permutations, cv_config.seed
        )
        crossval.write_score_tables(rows, os.path.join(args.out, "score_tables.csv"))
    with open(os.path.join(args.out, "segment_scores.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "fold", "tau", "segment", "mu", "var", "observed"])
        for s in scores:
            for i in range(s.mu.size):
                w.writerow([s.model, s.fold + 1, s.tau, i, repr(float(s.mu[i])),
                            repr(float(s.var[i])), int(s.observed[i])])
    _write_manifest(args.out, "crossval", config, {"seed": args.seed})
    print(f"crossval {args.models}: wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridcox")
    sub = p.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("config", help="configuration utilities")
    pc.add_argument("action", choices=["print-defaults"])
    pc.set_defaults(func=cmd_config)

    pv = sub.add_parser("check-variance", help="closed forms vs spectral oracle")
    pv.add_argument("--domains", default="plane,circle,line")
    pv.add_argument("--phis", default="-0.9,-0.5,0,0.5,1,2")
    pv.add_argument("--kappas", default="0.2,1,6.283185307179586")
    pv.add_argument("--tol", type=float, default=1e-6)
    pv.set_defaults(func=cmd_check_variance)

    pr = sub.add_parser("ratemap", help="kernel firing-rate maps")
    pr.add_argument("--session", required=True)
    pr.add_argument("--h", type=float, default=3.0, help="bandwidth in cm")
    pr.add_argument("--nx", type=int, default=50)
    pr.add_argument("--ny", type=int, default=50)
    pr.add_argument("--out", required=True)
    pr.add_argument("--config", default=None)
    pr.set_defaults(func=cmd_ratemap)

    ps = sub.add_parser("simulate", help="synthetic session from a truth file")
    ps.add_argument("--truth", required=True)
    ps.add_argument("--T", type=float, default=1800.0)
    ps.add_argument("--dt", type=float, default=0.033)
    ps.add_argument("--seed", type=int, default=7)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit one model to a session")
    pf.add_argument("--model", required=True, choices=["m0", "m0t", "mxt", "mxtt"])
    pf.add_argument("--session", required=True)
    pf.add_argument("--config", default=None)
    pf.add_argument("--out", required=True)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--threads", type=int, default=1)
    pf.set_defaults(func=cmd_fit)

    px = sub.add_parser("crossval", help="cross-validated model comparison")
    px.add_argument("--session", required=True)
    px.add_argument("--models", required=True)
    px.add_argument("--tau", default="2,5,10,20,30,40")
    px.add_argument("--J", type=int, default=None)
    px.add_argument("--K", type=int, default=None)
    px.add_argument("--config", default=None)
    px.add_argument("--out", required=True)
    px.add_argument("--seed", type=int, default=0)
    px.add_argument("--threads", type=int, default=1)
    px.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
