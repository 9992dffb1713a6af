"""Command-line driver: ``python -m singular_heat <subcommand> [--config F] [--seed S] [--out D]``.

Exit codes: 0 all checks passed, 1 a check failed, 2 configuration or
precondition error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import numbers
import sys
import time
from pathlib import Path

import numpy as np

from . import acceptance as acc
from .carleman import ValidationFailure, build_psi
from .config import ConfigError, RunConfig, defaults, load_config
from .evolution import TimeGrid, solve_forward
from .fields import rng_for, smooth_random_field
from .grid import (CoefficientSpec, GridError, MuOutOfRange, OmegaSpec, build_grid, hardy_mu_star,
                   make_coefficient, make_masks)
from .linalg import SolverError
from .operators import build_operator

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
SUBCOMMANDS = ("hardy", "spectrum", "solve", "carleman", "hum", "stabilize")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, numbers.Integral):
        return str(int(v))
    if isinstance(v, numbers.Real):
        return f"{float(v):.10g}"
    return str(v)


def write_rows(path: Path, rows: list[dict]) -> None:
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _coeff_spec(cfg: RunConfig) -> CoefficientSpec:
    return CoefficientSpec(cfg["coefficient.kind"], cfg["coefficient.value"], cfg["coefficient.amplitude"],
                           cfg["coefficient.width"])


# --- subcommands -----------------------------------------------------------------------
# each returns (results, extra summary lines)


def run_hardy(cfg: RunConfig, out: Path):
    r = acc.hardy_convergence(cfg["hardy.m_list"], cfg["hardy.tolerance"], cfg["hardy.gamma"], cfg["hardy.l"],
                              cfg["grid.L"])
    write_rows(out / "hardy.csv", r.rows)
    notes = [f"target mu*(3) = {acc.MU_STAR}, tolerance {cfg['hardy.tolerance']:g}, grids m = {cfg['hardy.m_list']}",
             f"improved Hardy K0 with gamma = {cfg['hardy.gamma']:g}, l = {cfg['hardy.l']:g}"]
    return [r], notes


def run_spectrum(cfg: RunConfig, out: Path):
    r = acc.spectral_blowup(cfg["spectrum.m"], cfg["spectrum.mu_factor"], cfg["spectrum.eps_list"],
                            cfg["spectrum.tau"], cfg["spectrum.T"], cfg["spectrum.control_factor"],
                            coeff_spec=_coeff_spec(cfg), mu=cfg["mu"])
    write_rows(out / "spectrum.csv", r.rows)
    notes = [f"m = {cfg['spectrum.m']}, epsilon = {cfg['spectrum.eps_list']}, tau = {cfg['spectrum.tau']:g}, "
             f"T = {cfg['spectrum.T']:g}, mu = {r.rows[0]['mu']:.6g}, control mu = {r.rows[-1]['mu']:.6g}"]
    return [r], notes


def run_solve(cfg: RunConfig, out: Path):
    cs = _coeff_spec(cfg)
    r = acc.energy_monotonicity(cfg["grid.m"], cfg["solve.mu_factors"], cfg["solve.samples"], cfg["time.T"],
                                cfg["time.N"], cfg["time.theta"], cs, cfg["seed"], mu=cfg["mu"],
                                L=cfg["grid.L"], shape=cfg["grid.shape"])
    write_rows(out / "solve_monotonicity.csv", r.rows)
    g = build_grid(cfg["grid.L"], cfg["grid.m"], cfg["grid.shape"])
    coeff = make_coefficient(g, cs)
    mu = 0.5 * coeff.p1 * hardy_mu_star(3) if cfg["mu"] is None else cfg["mu"]
    traj = solve_forward(build_operator(g, coeff, mu), smooth_random_field(g, rng_for(cfg["seed"], 1)),
                         tg=TimeGrid(cfg["time.T"], cfg["time.N"], cfg["time.theta"]))
    traj.write_csv(out / "solve_trajectory.csv", g)
    notes = [f"grid m = {cfg['grid.m']} ({cfg['grid.shape']}, L = {cfg['grid.L']:g}), T = {cfg['time.T']:g}, "
             f"N = {cfg['time.N']}, theta = {cfg['time.theta']:g}",
             f"forward trajectory at mu = {mu:.6g}: |u(T)| / |u(0)| = "
             f"{np.linalg.norm(traj.final) / np.linalg.norm(traj.frames[0]):.6g}"]
    return [r], notes


def run_carleman(cfg: RunConfig, out: Path):
    cs = _coeff_spec(cfg)
    r7 = acc.carleman_stability(cfg["carleman.m_list"], cfg["carleman.r"], cfg["weights.gamma"],
                                cfg["carleman.mu_factor"], cfg["weights.s_factors"], cfg["carleman.samples"],
                                cfg["time.T"], cfg["carleman.N"], cfg["time.theta"], cfg["weights.lambda"],
                                coeff_spec=cs, seed=cfg["seed"], mu=cfg["mu"])
    r8 = acc.weight_derivative_consistency(min(cfg["carleman.m_list"]), cfg["carleman.r"], cfg["weights.gamma"],
                                           cfg["carleman.fd_samples"], cfg["carleman.fd_steps"], cfg["time.T"],
                                           cfg["carleman.N"], seed=cfg["seed"])
    write_rows(out / "carleman.csv", r7.rows)
    write_rows(out / "carleman_derivatives.csv", r8.rows)
    # the blended construction for a ball omega is validated and reported, not asserted
    g = build_grid(1.0, min(cfg["carleman.m_list"]))
    masks = make_masks(g, OmegaSpec("ball", tuple(cfg["omega.center"]), cfg["omega.radius"]),
                       min(cfg["carleman.r"], 0.99 * OmegaSpec("ball", tuple(cfg["omega.center"]),
                                                                 cfg["omega.radius"]).distance_from_origin()))
    try:
        psi = build_psi(g, masks, "blended", strict=False)
        blended = (f"blended psi on ball omega: {'valid' if psi.valid else 'invalid'}, "
                   f"{len(psi.violations)} violated nodes, achieved delta = {psi.delta:.4g}")
        write_rows(out / "carleman_blended_violations.csv",
                   [{"node": i, "reason": why.replace(",", ";")} for i, why in psi.violations]
                   or [{"node": -1, "reason": "none"}])
    except ValidationFailure as exc:
        blended = f"blended psi on ball omega: not constructed ({exc})"
    notes = [f"annulus omega, r = {cfg['carleman.r']:g}, gamma = {cfg['weights.gamma']:g}, "
             f"s factors = {cfg['weights.s_factors']}, grids m = {cfg['carleman.m_list']}", blended]
    return [r7, r8], notes


def run_hum(cfg: RunConfig, out: Path):
    cs = _coeff_spec(cfg)
    r5 = acc.null_control(cfg["grid.m"], cfg["time.N"], cfg["hum.T_list"], cfg["hum.delta_pen"], cfg["hum.cg_tol"],
                          cfg["hum.mu_factor"], cfg["time.theta"], cs, cfg["seed"], mu=cfg["mu"])
    r4 = acc.gram_duality(cfg["grid.m"], cfg["solve.pairs"], cfg["time.T"], cfg["time.N"], cfg["time.theta"],
                          cfg["hum.mu_factor"], cs, cfg["seed"], hum_runs=getattr(r5, "runs", ()), mu=cfg["mu"])
    write_rows(out / "hum.csv", r5.rows)
    write_rows(out / "gram.csv", r4.rows)
    notes = [f"m = {cfg['grid.m']}, N = {cfg['time.N']}, T = {cfg['hum.T_list']}, delta_pen = {cfg['hum.delta_pen']:g}, "
             f"cg_tol = {cfg['hum.cg_tol']:g}, mu = {r5.rows[0]['mu']:.6g}"]
    return [r4, r5], notes


def run_stabilize(cfg: RunConfig, out: Path):
    r = acc.cutoff_stabilization(cfg["grid.m"], cfg["stabilize.mu_factor"], cfg["stabilize.omega_radius"],
                                 cfg["time.T"], cfg["time.N"], cfg["time.theta"], _coeff_spec(cfg), cfg["seed"],
                                 mu=cfg["mu"])
    write_rows(out / "stabilize.csv", r.rows)
    notes = [f"omega = ball(0, {cfg['stabilize.omega_radius']:g}), mu = {r.metrics['mu']:.6g}, "
             f"cutoff radius = {r.metrics['rho_chi']:.6g}, m = {cfg['grid.m']}"]
    return [r], notes


RUNNERS = {"hardy": run_hardy, "spectrum": run_spectrum, "solve": run_solve, "carleman": run_carleman,
           "hum": run_hum, "stabilize": run_stabilize}


def _summary(path: Path, name: str, cfg: RunConfig, results, notes, elapsed: float) -> list[str]:
    lines = [f"# {name}  seed = {cfg['seed']}"] + [f"  {n}" for n in notes]
    for r in results:
        lines.append(r.line())
        for k, v in r.metrics.items():
            lines.append(f"    {k} = {_fmt(v)}")
        lines.append(f"    wall_time_s = {r.elapsed:.2f}")
    lines.append(f"total wall time {elapsed:.2f} s")
    path.write_text("\n".join(lines) + "\n")
    return lines


def run_subcommand(name: str, cfg: RunConfig, out: Path) -> tuple[int, list[str]]:
    t0 = time.perf_counter()
    try:
        results, notes = RUNNERS[name](cfg, out)
    except (MuOutOfRange, GridError, ValidationFailure, ConfigError, ValueError) as exc:
        return EXIT_CONFIG, [f"{name}: {type(exc).__name__}: {exc}"]
    except (SolverError, ArithmeticError) as exc:
        return EXIT_SOLVER, [f"{name}: {type(exc).__name__}: {exc}"]
    lines = _summary(out / f"{name}_summary.txt", name, cfg, results, notes, time.perf_counter() - t0)
    code = EXIT_OK if all(r.passed for r in results) else EXIT_FAIL
    return code, lines


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singular_heat", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: output_dir from the config)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration field, e.g. mu=0.1 or grid.m=16")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS + ("all",):
        sub.add_parser(name, parents=[common])
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else defaults()
        cfg = cfg.with_overrides(args.override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    vals = dict(cfg.values)
    if args.seed is not None:
        vals["seed"] = args.seed
    if args.out is not None:
        vals["output_dir"] = args.out
    cfg = RunConfig(vals)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_used.txt").write_text(cfg.dump())
    names = SUBCOMMANDS if args.command == "all" else (args.command,)
    worst = EXIT_OK
    report = []
    for name in names:
        code, lines = run_subcommand(name, cfg, out)
        report.extend(lines)
        if code in (EXIT_CONFIG, EXIT_SOLVER):
            print(lines[-1], file=sys.stderr)
        for ln in lines:
            if ln.startswith("["):
                print(ln)
        worst = max(worst, code)
    if args.command == "all":
        (out / "all_summary.txt").write_text("\n".join(report) + "\n")
    return worst
