"""Penalized HUM null control, the stabilization functional and the cutoff stabilizer."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evolution import (Stepper, TimeGrid, Trajectory, adjoint_collocation, duality_residual,
                        solve_adjoint, solve_forward)
from .grid import DIM, Coefficient, Grid, MuOutOfRange, RegionMasks, hardy_mu_star
from .linalg import SolverError, pcg
from .operators import (SparseOperator, assemble_diffusion, assemble_potential, laplacian,
                        PotentialSpec, assemble_L, l2_norm)


class CgStall(SolverError):
    pass


class OriginOutsideOmega(ValueError):
    pass


class ResidualCheckFailed(AssertionError):
    pass


class GramOperator:
    """yT -> u(T): adjoint solve, restriction to omega, forward solve from rest.

    The forward step sources are the omega-restricted adjoint values paired with
    each step by the discrete duality identity, so the operator is exactly the
    transpose-consistent composition and symmetric to solver tolerance.
    """

    def __init__(self, L: SparseOperator, masks: RegionMasks, tg: TimeGrid):
        self.L, self.masks, self.tg = L, masks, tg
        self.stepper = Stepper(L, tg)
        self.omega = masks.omega.astype(float)
        self.applications = 0

    def adjoint(self, yT: np.ndarray) -> Trajectory:
        return solve_adjoint(self.L, yT, self.tg, self.stepper)

    def control_steps(self, y: Trajectory) -> np.ndarray:
        return adjoint_collocation(y) * self.omega

    def __call__(self, yT: np.ndarray) -> np.ndarray:
        self.applications += 1
        y = self.adjoint(yT)
        u = solve_forward(self.L, np.zeros_like(yT), tg=self.tg, step_source=self.control_steps(y),
                          stepper=self.stepper)
        return u.final


def gram_apply(L: SparseOperator, masks: RegionMasks, tg: TimeGrid, yT: np.ndarray) -> np.ndarray:
    if yT.shape[0] != L.dimension:
        raise ValueError(f"yT has {yT.shape[0]} entries, operator has {L.dimension}")
    return GramOperator(L, masks, tg)(yT)


@dataclass(frozen=True, eq=False)
class HumResult:
    yT_opt: np.ndarray
    control: Trajectory  # frames 1_omega y(t_k)
    control_steps: np.ndarray  # per-step values actually applied
    state: Trajectory
    terminal_norm: float
    cost: float
    cg_iterations: int
    delta_pen: float
    j_value: float
    u0_norm: float
    free_terminal_norm: float
    duality_residual: float
    mu: float
    in_range: bool = True
    wall_time_s: float = field(default=0.0, compare=False)

    def as_row(self) -> dict:
        return {"mu": self.mu, "delta_pen": self.delta_pen, "cg_iters": self.cg_iterations,
                "terminal_norm": self.terminal_norm, "cost": self.cost, "j_value": self.j_value,
                "u0_norm": self.u0_norm, "free_terminal_norm": self.free_terminal_norm,
                "duality_residual": self.duality_residual}


HUM_COLUMNS = ["mu", "delta_pen", "cg_iters", "terminal_norm", "cost", "j_value", "u0_norm",
               "free_terminal_norm", "duality_residual"]


def write_hum_csv(path: str | Path, results: list[HumResult], extra: list[dict] | None = None) -> None:
    extra_cols = sorted(extra[0]) if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(extra_cols + HUM_COLUMNS)
        for i, res in enumerate(results):
            row = res.as_row()
            pre = [f"{extra[i][c]:.10g}" for c in extra_cols] if extra else []
            w.writerow(pre + [str(row[c]) if c == "cg_iters" else f"{row[c]:.10g}" for c in HUM_COLUMNS])


def _cg(apply, b: np.ndarray, tol: float, maxiter: int, stall_window: int = 25):
    """Plain CG on a black-box SPD operator with stall detection."""
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    history = [math.sqrt(rr)]
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        curv = float(p @ Ap)
        if curv <= 0:
            raise CgStall(f"nonpositive curvature {curv:.3e} at CG iteration {it}")
        alpha = rr / curv
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        history.append(math.sqrt(rr_new))
        if history[-1] <= tol * bnorm:
            return x, it
        if len(history) > stall_window and history[-1] > 0.99 * min(history[:-stall_window]):
            raise CgStall(f"residual flat at {history[-1] / bnorm:.3e} after {it} iterations; "
                          "increase delta_pen")
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise CgStall(f"relative residual {history[-1] / bnorm:.3e} after {maxiter} iterations; increase delta_pen")


def synthesize_control(L: SparseOperator, masks: RegionMasks, tg: TimeGrid, u0: np.ndarray, grid: Grid,
                       delta_pen: float = 1e-6, cg_tol: float = 1e-8, coeff: Coefficient | None = None,
                       mu: float | None = None, allow_out_of_range: bool = False,
                       maxiter: int = 2000) -> HumResult:
    """Solve (Lambda + delta_pen) yT = -u_free(T) and return the control 1_omega y."""
    t0 = time.perf_counter()
    in_range = True
    if coeff is not None and mu is not None:
        bound = coeff.p1**2 / coeff.p2 * hardy_mu_star(DIM)
        in_range = 0 <= mu < bound
        if not in_range and not allow_out_of_range:
            raise MuOutOfRange(f"mu={mu} outside [0, p1^2/p2 mu*) = [0, {bound:.6g})")
    if delta_pen < 0:
        raise ValueError("delta_pen must be >= 0")
    gram = GramOperator(L, masks, tg)
    u0 = np.asarray(u0, dtype=float)
    free = solve_forward(L, u0, tg=tg, stepper=gram.stepper)
    yT, its = _cg(lambda v: gram(v) + delta_pen * v, -free.final, cg_tol, maxiter)
    y = gram.adjoint(yT)
    steps = gram.control_steps(y)
    u = solve_forward(L, u0, tg=tg, step_source=steps, masks=masks, stepper=gram.stepper)
    frames = Trajectory(tg, y.frames * gram.omega)
    cost = math.sqrt(grid.cell_volume * tg.dt * float(np.einsum("ij,ij->", steps, steps)))
    return HumResult(
        yT_opt=yT, control=frames, control_steps=steps, state=u,
        terminal_norm=l2_norm(grid, u.final), cost=cost, cg_iterations=its, delta_pen=delta_pen,
        j_value=evaluate_J(grid, u, frames), u0_norm=l2_norm(grid, u0),
        free_terminal_norm=l2_norm(grid, free.final), duality_residual=duality_residual(grid, u, y, steps),
        mu=float("nan") if mu is None else float(mu), in_range=in_range,
        wall_time_s=time.perf_counter() - t0)


def _trapezoid(values: np.ndarray, dt: float) -> float:
    if len(values) == 1:
        return 0.0
    return float(dt * (values.sum() - 0.5 * (values[0] + values[-1])))


def evaluate_J(grid: Grid, u: Trajectory, f: Trajectory, norm: str = "l2") -> float:
    """1/2 int |u|^2 + 1/2 int |f(t)|^2 with the trapezoidal rule in time.

    ``norm="h-1"`` measures the control in the dual norm <f, A^{-1} f> of the
    Dirichlet Laplacian instead of L^2.
    """
    if u.frames.shape != f.frames.shape:
        raise ValueError("state and control trajectories do not match")
    vol, dt = grid.cell_volume, u.time_grid.dt
    uu = vol * np.einsum("ij,ij->i", u.frames, u.frames)
    if norm == "l2":
        ff = vol * np.einsum("ij,ij->i", f.frames, f.frames)
    elif norm == "h-1":
        A = laplacian(grid).matrix
        ff = np.empty(len(f.frames))
        for k, fk in enumerate(f.frames):
            v, _ = pcg(A, fk, tol=1e-12, maxiter=20 * grid.size)
            ff[k] = vol * float(fk @ v)
    else:
        raise ValueError(f"unknown control norm {norm!r}")
    return 0.5 * _trapezoid(uu, dt) + 0.5 * _trapezoid(ff, dt)


# --- cutoff stabilizer ----------------------------------------------------------------


def smooth_cutoff(radius: np.ndarray, rho_chi: float) -> np.ndarray:
    """C-infinity radial cutoff: 1 for |x| <= rho_chi / 2, 0 for |x| >= rho_chi."""
    t = np.clip((np.asarray(radius, dtype=float) - 0.5 * rho_chi) / (0.5 * rho_chi), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        b = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    return a / (a + b)


def cutoff_radius(masks: RegionMasks, h: float) -> float:
    """Largest cutoff radius with a 2h collar inside omega."""
    spec = masks.omega_spec
    if spec.kind != "ball" or np.linalg.norm(spec.center) >= spec.radius:
        raise OriginOutsideOmega("the cutoff construction needs the origin strictly inside a ball omega")
    rho = spec.radius - float(np.linalg.norm(spec.center)) - 2 * h
    if rho <= 2 * h:
        raise OriginOutsideOmega(f"omega leaves no room for the cutoff at h={h:.4g}")
    return rho


@dataclass(frozen=True, eq=False)
class StabilizerResult:
    state: Trajectory
    control: Trajectory
    j_value: float
    chi: np.ndarray
    rho_chi: float
    max_residual: float  # full singular system, relative, worst step
    max_norm_ratio: float  # max_t |u(t)| / |u0|
    leak: float  # max |f| outside omega

    def as_row(self) -> dict:
        return {"rho_chi": self.rho_chi, "j_value": self.j_value, "max_residual": self.max_residual,
                "max_norm_ratio": self.max_norm_ratio, "leak": self.leak}


def cutoff_stabilizer(grid: Grid, coeff: Coefficient, mu: float, masks: RegionMasks, u0: np.ndarray,
                      tg: TimeGrid, rho_chi: float | None = None, residual_tol: float = 1e-8) -> StabilizerResult:
    """Evolve with the potential (1 - chi) mu / |x|^2 and move the rest into the control.

    The pair (u, f) with f = -chi mu u / |x|^2 then solves the full singular
    system; the per-step residual of that system is measured and asserted.
    """
    if not masks.omega_spec.contains_origin():
        raise OriginOutsideOmega("the origin must lie inside omega")
    if rho_chi is None:
        rho_chi = cutoff_radius(masks, grid.h)
    chi = smooth_cutoff(grid.radius, rho_chi)
    diffusion = assemble_diffusion(grid, coeff)
    L_cut = assemble_L(diffusion, assemble_potential(grid, PotentialSpec(mu, 0.0, chi)))
    u = solve_forward(L_cut, np.asarray(u0, dtype=float), tg=tg)
    weight = chi * mu / grid.radius**2
    f = Trajectory(tg, -u.frames * weight)
    leak = float(np.abs(f.frames[:, ~masks.omega]).max(initial=0.0))
    # substitute into the full singular system with the same collocation
    L_full = assemble_L(diffusion, assemble_potential(grid, PotentialSpec(mu, 0.0)))
    st = Stepper(L_full, tg)
    fc = (1.0 - tg.theta) * f.frames[:-1] + tg.theta * f.frames[1:]
    worst = 0.0
    for k in range(tg.N):
        lhs = st.implicit @ u.frames[k + 1]
        res = lhs - st.explicit @ u.frames[k] - tg.dt * fc[k]
        scale = float(np.linalg.norm(lhs)) or 1.0
        worst = max(worst, float(np.linalg.norm(res)) / scale)
    norms = u.norms(grid)
    ratio = float(norms.max() / norms[0]) if norms[0] > 0 else 0.0
    j = evaluate_J(grid, u, f)
    if worst > residual_tol:
        raise ResidualCheckFailed(f"full-system residual {worst:.3e} exceeds {residual_tol:g}")
    return StabilizerResult(u, f, j, chi, rho_chi, worst, ratio, leak)
