"""Command-line front end: ``vpconvex run|check|plot``.

Exit codes: 0 ok, 2 configuration, 3 solver, 4 integrity, 5 non-convergence.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import diagnostics, geometry, picard, poisson, simulation, transport
from .errors import (ConfigError, FlatnessError, IntegrityError, NonConvergenceError,
                     SolverError, VPError)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INTEGRITY, EXIT_NONCONVERGENCE = 0, 2, 3, 4, 5

CONVERGENCE_COLUMNS = ["iterate", "l1_distance", "max_Q"]


def exit_code(err):
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, NonConvergenceError):
        return EXIT_NONCONVERGENCE
    if isinstance(err, SolverError):
        return EXIT_SOLVER
    if isinstance(err, IntegrityError):
        return EXIT_INTEGRITY
    return EXIT_SOLVER


# setup -------------------------------------------------------------------------

def make_domain(cfg):
    if cfg["domain.kind"] == "ball" and cfg["domain.semi_axes"] == (1.0, 1.0, 1.0):
        return geometry.ConvexDomain.unit_ball(delta_tube=cfg["domain.delta_tube"])
    return geometry.ConvexDomain.ellipsoid(*cfg["domain.semi_axes"],
                                           delta_tube=cfg["domain.delta_tube"])


def base_flux(cfg):
    if cfg["poisson.h_profile"] == "tilted":
        return poisson.BoundaryFlux.tilted(cfg["poisson.h_tilt"], semi_axes=cfg["domain.semi_axes"])
    return poisson.BoundaryFlux.uniform(1.0)


def initial_spec(cfg):
    return transport.InitialDataSpec(
        cfg["init.profile"], cfg.profile_params, delta0=cfg["init.delta0"],
        flat_value=cfg["init.flat_value"], flat_const=cfg["init.flat_const"],
        support_bounds=(cfg["init.support_lo"], cfg["init.support_hi"]))


def solver_options(cfg):
    return {"tol": cfg["poisson.tol"], "max_iter": cfg["poisson.max_iter"],
            "compat_tol": cfg["poisson.compat_tol"], "scheme": cfg["poisson.scheme"]}


def setup(cfg):
    """Domain, grid, markers and normalized wall flux; raises on inadmissible data."""
    domain = make_domain(cfg)
    grid = poisson.Grid(domain, cfg["poisson.grid_n"])
    markers = transport.sample_initial(initial_spec(cfg), domain, cfg["init.n_per_dim"])
    flux = transport.normalize_flux(markers, base_flux(cfg), grid.quadrature)
    return domain, grid, markers, flux


def estimate_memory(cfg, n_markers, grid):
    """Rough peak bytes: markers, stored trajectories and field histories."""
    steps = int(round(cfg["picard.T"] / cfg["picard.dt"])) + 1
    per_marker = 16 * 8
    cells = grid.size * 8 * 6
    if cfg["picard.mode"] == "picard":
        # two iterates keep positions and velocities at every step
        traj = 2 * steps * n_markers * 6 * 8
        hist = 2 * steps * cells
    else:
        traj = n_markers * 6 * 4 * (1 + len(cfg["diag.windows"]) * steps // 4)
        hist = 2 * cells
    solver = 27 * 27 * grid.size * 12 // 4
    return int(n_markers * per_marker + traj + hist + solver)


# run -----------------------------------------------------------------------------

def _write_convergence(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_COLUMNS)
        for it, dist, q in rows:
            w.writerow([str(int(it)), repr(float(dist)), repr(float(q))])


def execute(cfg):
    """Run the configured simulation; returns a dict of in-memory results."""
    domain, grid, markers, flux = setup(cfg)
    solver = solver_options(cfg)
    T, dt = cfg["picard.T"], cfg["picard.dt"]
    windows = cfg["diag.windows"] if cfg["diag.partition"] else ()
    probes = None
    if windows and cfg["diag.probes"] > 0:
        probes = simulation.make_probes(cfg["diag.probes"], cfg["diag.probe_speed"],
                                        cfg["diag.probe_radius"], cfg["run.seed"])
    common = dict(tracers=cfg["diag.tracers"], window_ends=windows, delta=cfg["diag.delta"],
                  c0=cfg["diag.c0"], solver=solver, probes=probes)
    mode = cfg["picard.mode"]
    if mode == "picard" and cfg["picard.max_iter"] == 1:
        mode = "linear"
    timings = []
    out = {"mode": mode, "convergence": [], "converged": True}
    t0 = time.perf_counter()
    if mode == "picard":
        tol = cfg["picard.tol"] * markers.mass()
        report = picard.run_picard(domain, markers, grid, flux, T, dt, tol=tol,
                                   max_iter=cfg["picard.max_iter"], solver=solver)
        state = report.state
        out["records"] = simulation.picard_records(state)
        out["convergence"] = [(it, d, q) for it, d, q, _ in report.rows()]
        timings = [(it, s) for it, _, _, s in report.rows()]
        out["converged"] = report.converged
        out["theta"] = report.theta
        out["markers"] = state.markers
        out["windows"] = (simulation.picard_windows(domain, state, windows, probes,
                                                    cfg["diag.delta"], cfg["diag.c0"])
                          if windows and probes is not None else [])
    else:
        if mode == "linear":
            res = simulation.static_run(domain, markers, grid, flux, T, dt, **common)
        else:
            res = simulation.run_markers(domain, markers, grid, flux, T, dt, **common)
        out["records"] = res.records
        out["markers"] = res.markers
        out["windows"] = res.windows
    out["seconds"] = time.perf_counter() - t0
    out["timings"] = timings
    return out


def write_outputs(cfg, result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved"), "w") as fh:
        fh.write(cfg.resolved_text())
    diagnostics.write_records(result["records"], os.path.join(out_dir, "diagnostics.csv"))
    _write_convergence(result["convergence"], os.path.join(out_dir, "convergence.csv"))
    if cfg["diag.partition"]:
        rows = [(w.t, w.partition, w.reference) for w in result["windows"]]
        diagnostics.write_partition(rows, os.path.join(out_dir, "partition.csv"))
    if cfg["diag.snapshot"]:
        transport.write_snapshot(result["markers"], os.path.join(out_dir, "markers_final.csv"))
    # wall-clock times vary between runs, so they stay out of the CSV files
    with open(os.path.join(out_dir, "timing.log"), "w") as fh:
        fh.write(f"mode {result['mode']}\n")
        for it, s in result["timings"]:
            fh.write(f"iterate {it} seconds {s:.6f}\n")
        fh.write(f"total seconds {result['seconds']:.6f}\n")


def cmd_run(cfg, out=None):
    out = out or sys.stdout
    result = execute(cfg)
    out_dir = cfg["run.output_dir"]
    write_outputs(cfg, result, out_dir)
    recs = result["records"]
    print(f"mode {result['mode']}: {len(recs) - 1} steps, energy drift "
          f"{diagnostics.energy_drift(recs):.3e}, outputs in {out_dir}", file=out)
    if not result["converged"]:
        last = result["convergence"][-1][1] if result["convergence"] else float("nan")
        print(f"Picard iteration did not converge: last l1 distance {last:.3e}", file=out)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# check ---------------------------------------------------------------------------

def cmd_check(cfg, out=None):
    """Validate the setup without time stepping; exit 0 iff admissible."""
    out = out or sys.stdout
    violations = []
    domain = make_domain(cfg)
    grid = poisson.Grid(domain, cfg["poisson.grid_n"])
    quad = grid.quadrature
    h0 = base_flux(cfg)
    if np.any(h0(quad.points) <= 0.0):
        violations.append("h must be positive on the boundary")
    markers = None
    try:
        markers = transport.sample_initial(initial_spec(cfg), domain, cfg["init.n_per_dim"])
        flat = "flat near the grazing set"
    except FlatnessError as err:
        flat = f"NOT flat at {len(err.points)} lattice points"
        pts = "; ".join(f"x={np.round(x, 6).tolist()} v={np.round(v, 6).tolist()}"
                        for x, v in err.points[:10])
        violations.append(f"flatness violated at lattice points: {pts}")
    except IntegrityError as err:
        flat = "not evaluated"
        violations.append(str(err))
    mass = markers.mass() if markers is not None else float("nan")
    print(f"markers: {len(markers) if markers is not None else 0}", file=out)
    print(f"mass: {mass!r}", file=out)
    residual = float("nan")
    flux_total = float("nan")
    if markers is not None and not violations:
        try:
            flux = transport.normalize_flux(markers, h0, quad)
            flux_total = float(quad.integrate(flux(quad.points)))
            rho = poisson.deposit_density(markers.x, markers.charge, grid)
            residual = float(poisson.check_compatibility(grid, rho, flux))
            if abs(residual) > cfg["poisson.compat_tol"] * max(abs(mass), 1e-300):
                violations.append(f"compatibility residual {residual:.3e} too large")
        except VPError as err:
            violations.append(str(err))
    print(f"wall flux integral: {flux_total!r}", file=out)
    print(f"compatibility residual: {residual!r}", file=out)
    print(f"flatness: {flat}", file=out)
    n = len(markers) if markers is not None else 0
    print(f"estimated memory: {estimate_memory(cfg, n, grid) / 2**20:.1f} MiB", file=out)
    if violations:
        print("inadmissible:", file=out)
        for v in violations:
            print(f"  - {v}", file=out)
        return EXIT_INTEGRITY
    print("admissible", file=out)
    return EXIT_OK


# plot ----------------------------------------------------------------------------

def _read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return {k: data[:, i] for i, k in enumerate(header)}


def cmd_plot(out_dir, out=None):
    """Render diagnostics.csv (and convergence.csv when non-empty) to PNG files."""
    out = out or sys.stdout
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError("plot needs matplotlib (pip install artifact[plot])") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = os.path.join(out_dir, "diagnostics.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no diagnostics.csv in {out_dir}")
    d = _read_csv(path)
    fig, ax = plt.subplots(1, 3, figsize=(13, 3.8))
    for k in ("kinetic", "field_energy", "total"):
        ax[0].plot(d["t"], d[k], label=k)
    ax[0].set_xlabel("t")
    ax[0].legend()
    ax[1].plot(d["t"], d["Q"])
    ax[1].set_xlabel("t")
    ax[1].set_ylabel("Q")
    ax[2].plot(d["t"], d["rho_linf"], label="max rho")
    ax[2].plot(d["t"], d["rho_l53"], label="rho in L^5/3")
    ax[2].set_xlabel("t")
    ax[2].legend()
    fig.tight_layout()
    written = [os.path.join(out_dir, "diagnostics.png")]
    fig.savefig(written[0], dpi=120)
    plt.close(fig)
    conv = os.path.join(out_dir, "convergence.csv")
    if os.path.exists(conv):
        c = _read_csv(conv)
        if c["iterate"].size:
            fig, ax = plt.subplots(figsize=(5, 3.8))
            ax.semilogy(c["iterate"], c["l1_distance"], "o-")
            ax.set_xlabel("iterate")
            ax.set_ylabel("l1 distance")
            fig.tight_layout()
            written.append(os.path.join(out_dir, "convergence.png"))
            fig.savefig(written[-1], dpi=120)
            plt.close(fig)
    for p in written:
        print(p, file=out)
    return EXIT_OK


# entry point ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (section.key = value lines)")
    common.add_argument("--output", help="output directory (overrides run.output_dir)")
    common.add_argument("--seed", type=int, help="seed (overrides run.seed)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set one configuration key; repeatable")
    parser = argparse.ArgumentParser(prog="vpconvex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a simulation and write CSV outputs")
    sub.add_parser("check", parents=[common], help="validate a configuration")
    sub.add_parser("plot", parents=[common], help="render CSV outputs to PNG")
    return parser


def load_config(args):
    overrides = list(args.override)
    if args.output is not None:
        overrides.append(f"run.output_dir={args.output}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return cfgmod.load(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "plot" and args.config is None:
            out_dir = args.output or "output"
        else:
            if args.config is None:
                raise ConfigError(f"{args.command} needs --config")
            cfg = load_config(args)
            out_dir = cfg["run.output_dir"]
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "check":
            return cmd_check(cfg)
        return cmd_plot(out_dir)
    except VPError as err:
        print(f"error: {err}", file=sys.stderr)
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
