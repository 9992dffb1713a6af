"""Bottom of the spectrum: inverse iteration, discrete Hardy constants and the
epsilon sweep of the regularized operator."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import DIM, Coefficient, Grid, MuOutOfRange, RegionMasks, hardy_mu_star
from .linalg import IndefiniteOperator, InnerSolveDivergence, SolverError, pcg
from .operators import SparseOperator, build_operator, laplacian, restricted_h1_norm


class NoConvergence(SolverError):
    pass


class ShiftInsideSpectrum(SolverError):
    pass


class ResolutionGuard(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EigenResult:
    lambda0: float
    phi0: np.ndarray  # unit Euclidean norm; rescale with the grid volume for L^2
    residual: float
    iterations: int
    shift: float = 0.0


def _as_matrix(A) -> sp.csr_matrix:
    if isinstance(A, SparseOperator):
        return A.matrix
    return sp.csr_matrix(A)


def smallest_eigenpair(A, shift_hint: float | None = None, tol: float = 1e-8, max_iter: int = 500,
                       seed: int = 0, v0: np.ndarray | None = None) -> EigenResult:
    """Shifted inverse iteration for the smallest eigenvalue of a symmetric matrix.

    The first shift is the Gershgorin lower bound minus one.  Once the iterate
    has settled the shift moves up to ``rho - 2 |r|`` (still below the
    eigenvalue the Rayleigh quotient ``rho`` approximates), which keeps every
    inner CG solve positive definite.  A CG breakdown on an indefinite shifted
    matrix backs the shift off halfway toward the last safe one.
    """
    M = _as_matrix(A)
    n = M.shape[0]
    diag = M.diagonal()
    off = np.asarray(abs(M).sum(axis=1)).ravel() - np.abs(diag)
    safe = float(np.min(diag - off)) - 1.0
    if shift_hint is not None:
        safe = min(safe, shift_hint)
    shift = safe
    if v0 is None:
        v = np.random.default_rng(seed).random(n) + 0.5
    else:
        v = np.array(v0, dtype=float)
    v /= np.linalg.norm(v)
    eye = sp.identity(n, format="csr")
    shifted = (M - shift * eye).tocsr()
    rho, res = float(v @ (M @ v)), np.inf
    for it in range(1, max_iter + 1):
        try:
            w, _ = pcg(shifted, v, x0=v / max(rho - shift, 1e-300), tol=1e-12, maxiter=20 * n)
        except IndefiniteOperator:
            if shift <= safe:
                raise ShiftInsideSpectrum(f"shift {shift:.6g} is inside the spectrum")
            shift = safe + 0.5 * (shift - safe) if shift - safe > 1e-12 else safe
            shifted = (M - shift * eye).tocsr()
            continue
        except InnerSolveDivergence as exc:
            raise NoConvergence(f"inner solve failed at iteration {it}: {exc}") from exc
        safe = shift
        v = w / np.linalg.norm(w)
        Mv = M @ v
        rho = float(v @ Mv)
        r = Mv - rho * v
        res = float(np.linalg.norm(r))
        if res <= tol * (1.0 + abs(rho)):
            if v.sum() < 0:
                v = -v
            return EigenResult(rho, v, res, it, shift)
        target = rho - 2.0 * res - 1e-10 * (1.0 + abs(rho))
        if target > shift:
            shift = target
            shifted = (M - shift * eye).tocsr()
    raise NoConvergence(f"inverse iteration: residual {res:.3e} after {max_iter} iterations")


def hardy_quotient_operator(grid: Grid, lap: SparseOperator | None = None) -> sp.csr_matrix:
    """D A D with D = diag(|x|): the pencil (A, diag(1/|x|^2)) in standard form."""
    if lap is None:
        lap = laplacian(grid)
    D = sp.diags(grid.radius)
    return (D @ lap.matrix @ D).tocsr()


def hardy_constant(grid: Grid) -> float:
    """Smallest nu with A u = nu diag(1/|x|^2) u: the discrete Hardy constant."""
    return smallest_eigenpair(hardy_quotient_operator(grid)).lambda0


def improved_hardy_K0(grid: Grid, gamma: float, l: float) -> float:
    """Smallest K0 with mu* M_2 + l M_gamma <= A + K0 I on the grid (signed)."""
    if not 0 < gamma < 2:
        raise ValueError(f"gamma must lie in (0, 2), got {gamma}")
    if l < 0:
        raise ValueError(f"l must be >= 0, got {l}")
    r = grid.radius
    lap = laplacian(grid)
    B = lap.matrix - sp.diags(hardy_mu_star(grid.n) / r**2 + l / r**gamma)
    return -smallest_eigenpair(B.tocsr()).lambda0


def concentration_norm(grid: Grid, phi: np.ndarray, tau: float) -> float:
    """Discrete H^1 norm of ``phi`` on nodes with |x| > tau."""
    if tau <= 2 * grid.h:
        raise ResolutionGuard(f"tau={tau} must exceed 2h={2 * grid.h}")
    return restricted_h1_norm(grid, phi, grid.radius > tau)


# --- cost lower bound ---------------------------------------------------------------


def log_j_branches(lambda0: float, T: float, h1_omega_sq: float) -> tuple[float, float]:
    """Logs of (e^{2aT} - 1)/(16 a) and a (1 - e^{-2aT}) / (4 |phi|^2_{H^1(omega)}), a = |lambda0|."""
    a = abs(lambda0)
    if a == 0.0:
        return math.log(T / 8.0), -math.inf
    x = 2.0 * a * T
    first = x + math.log(-math.expm1(-x)) - math.log(16.0 * a)
    if h1_omega_sq == 0.0:
        second = math.inf
    else:
        second = math.log(a) + math.log(-math.expm1(-x)) - math.log(4.0 * h1_omega_sq)
    return first, second


def j_lower_bound(lambda0: float, T: float, h1_omega_sq: float) -> float:
    """Lower bound on the stabilization cost of the bottom mode, evaluated in log space."""
    first, second = log_j_branches(lambda0, T, h1_omega_sq)
    lo = min(first, second)
    return math.exp(lo) if lo < 709.0 else math.inf


# --- epsilon sweep ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRecord:
    epsilon: float
    lambda0: float
    residual: float
    concentration_norm: float
    h1_omega_norm: float
    tau: float
    T: float
    j_lower_bound: float
    wall_time_s: float = field(default=0.0, compare=False)

    def recomputed_j(self) -> float:
        return j_lower_bound(self.lambda0, self.T, self.h1_omega_norm**2)

    def as_row(self) -> dict:
        return {"epsilon": self.epsilon, "lambda0": self.lambda0, "residual": self.residual,
                "concentration_norm": self.concentration_norm, "h1_omega_norm": self.h1_omega_norm,
                "j_lower_bound": self.j_lower_bound}


SWEEP_COLUMNS = ["epsilon", "lambda0", "residual", "concentration_norm", "h1_omega_norm", "j_lower_bound"]


def spectral_sweep(grid: Grid, coeff: Coefficient, mu: float, eps_list, tau: float, T: float,
                   masks: RegionMasks, check_regime: bool = True) -> list[SweepRecord]:
    """Bottom eigenpair of the regularized operator for each epsilon (strictly decreasing)."""
    eps = [float(e) for e in eps_list]
    if check_regime and not mu > coeff.p2 * hardy_mu_star(DIM):
        raise MuOutOfRange(
            f"mu={mu} does not exceed p2 mu* = {coeff.p2 * hardy_mu_star(DIM):.6g}; "
            "the blow-up statement assumes mu > p2 mu*")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError(f"epsilon list must be strictly decreasing: {eps}")
    if min(eps) < grid.h:
        raise ResolutionGuard(f"epsilon={min(eps)} is below the mesh size h={grid.h:.4g}")
    records = []
    v0 = None
    for e in eps:
        t0 = time.perf_counter()
        L = build_operator(grid, coeff, mu, e)
        res = smallest_eigenpair(L, v0=v0)
        v0 = res.phi0
        phi = res.phi0 / math.sqrt(grid.cell_volume)  # unit L^2 norm
        conc = concentration_norm(grid, phi, tau)
        h1w = restricted_h1_norm(grid, phi, masks.omega)
        records.append(SweepRecord(e, res.lambda0, res.residual, conc, h1w, tau, T,
                                   j_lower_bound(res.lambda0, T, h1w**2), time.perf_counter() - t0))
    return records


def write_sweep_csv(path: str | Path, records: list[SweepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for rec in records:
            row = rec.as_row()
            w.writerow([f"{row[c]:.10g}" for c in SWEEP_COLUMNS])
