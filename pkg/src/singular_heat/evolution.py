"""Theta-scheme time stepping for the controlled system and its adjoint.

Forward step::

    (I + th dt L) u[k+1] = (I - (1 - th) dt L) u[k] + dt g[k]

where ``g[k]`` is the source collocated at ``t[k] + th dt`` (linear interpolation
of the source frames) or an explicit per-step source.  The adjoint runs the same
step matrices in reversed time, so the two are exact discrete transposes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import Grid, RegionMasks
from .linalg import InnerSolveDivergence, default_maxiter, pcg
from .operators import SparseOperator, h1_norm, l2_norm, laplacian

INNER_TOL = 1e-10


class SourceOutsideControl(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    theta: float = 0.5

    def __post_init__(self):
        if not self.T > 0 or self.N < 1:
            raise ValueError(f"need T > 0 and N >= 1, got T={self.T}, N={self.N}")
        if self.theta not in (0.5, 1.0):
            raise ValueError(f"theta must be 1/2 or 1, got {self.theta}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    time_grid: TimeGrid
    frames: np.ndarray  # (N + 1, n)

    def __post_init__(self):
        if self.frames.shape[0] != self.time_grid.N + 1:
            raise ValueError(f"{self.frames.shape[0]} frames for N={self.time_grid.N}")

    @property
    def final(self) -> np.ndarray:
        return self.frames[-1]

    def reversed(self) -> "Trajectory":
        return Trajectory(self.time_grid, self.frames[::-1].copy())

    def norms(self, grid: Grid) -> np.ndarray:
        return np.sqrt(grid.cell_volume * np.einsum("ij,ij->i", self.frames, self.frames))

    def write_csv(self, path: str | Path, grid: Grid) -> None:
        lap = laplacian(grid)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "time", "l2_norm", "h1_norm"])
            for k, (t, u) in enumerate(zip(self.time_grid.times, self.frames)):
                w.writerow([k, f"{t:.10g}", f"{l2_norm(grid, u):.10g}", f"{h1_norm(grid, u, lap):.10g}"])


class Stepper:
    """Holds the two step matrices for an operator and a time grid."""

    def __init__(self, L: SparseOperator, tg: TimeGrid, tol: float = INNER_TOL):
        n = L.dimension
        eye = sp.identity(n, format="csr")
        self.tg = tg
        self.tol = tol
        self.implicit = (eye + tg.theta * tg.dt * L.matrix).tocsr()
        self.explicit = (eye - (1.0 - tg.theta) * tg.dt * L.matrix).tocsr()
        self._diag = self.implicit.diagonal()
        self.maxiter = default_maxiter(n)
        self.iterations = 0

    def step(self, u: np.ndarray, g: np.ndarray | None, k: int) -> np.ndarray:
        rhs = self.explicit @ u
        if g is not None:
            rhs = rhs + self.tg.dt * g
        try:
            x, its = pcg(self.implicit, rhs, x0=u, tol=self.tol, maxiter=self.maxiter, diag=self._diag)
        except InnerSolveDivergence as exc:
            raise InnerSolveDivergence(f"step {k}: {exc}") from exc
        self.iterations += its
        return x

    def run(self, u0: np.ndarray, steps: np.ndarray | None = None) -> np.ndarray:
        tg = self.tg
        frames = np.empty((tg.N + 1, u0.shape[0]))
        frames[0] = u0
        for k in range(tg.N):
            frames[k + 1] = self.step(frames[k], None if steps is None else steps[k], k)
        return frames


def collocate(source: Trajectory, theta: float) -> np.ndarray:
    """Per-step source values at t[k] + theta dt."""
    f = source.frames
    return (1.0 - theta) * f[:-1] + theta * f[1:]


def solve_forward(L: SparseOperator, u0: np.ndarray, source: Trajectory | None = None,
                  masks: RegionMasks | None = None, tg: TimeGrid | None = None,
                  step_source: np.ndarray | None = None, stepper: Stepper | None = None) -> Trajectory:
    """Forward solve from ``u0``; ``source`` frames must vanish outside omega when masks are given."""
    if tg is None:
        if source is None:
            raise ValueError("time grid required")
        tg = source.time_grid
    if u0.shape[0] != L.dimension:
        raise ValueError(f"u0 has {u0.shape[0]} entries, operator has {L.dimension}")
    if source is not None and step_source is not None:
        raise ValueError("give either source frames or step_source, not both")
    steps = step_source
    if source is not None:
        steps = collocate(source, tg.theta)
    if steps is not None and masks is not None:
        leak = np.abs(steps[:, ~masks.omega]).max(initial=0.0)
        if source is not None:
            leak = max(leak, np.abs(source.frames[:, ~masks.omega]).max(initial=0.0))
        if leak > 0:
            raise SourceOutsideControl(f"source is nonzero outside omega (max {leak:.3e})")
    if stepper is None:
        stepper = Stepper(L, tg)
    return Trajectory(tg, stepper.run(np.asarray(u0, dtype=float), steps))


def solve_adjoint(L: SparseOperator, yT: np.ndarray, tg: TimeGrid,
                  stepper: Stepper | None = None) -> Trajectory:
    """Backward solve of dy/dt = L y with y(T) = yT; frames indexed by forward time."""
    if stepper is None:
        stepper = Stepper(L, tg)
    rev = stepper.run(np.asarray(yT, dtype=float))
    return Trajectory(tg, rev[::-1].copy())


def adjoint_collocation(y: Trajectory) -> np.ndarray:
    """Adjoint values paired with each forward step in the discrete duality identity.

    Equal to ``(I + th dt L)^{-1} y[k+1]``, i.e. ``th y[k] + (1 - th) y[k+1]``.
    """
    th = y.time_grid.theta
    f = y.frames
    return th * f[:-1] + (1.0 - th) * f[1:]


def duality_residual(grid: Grid, u: Trajectory, y: Trajectory, steps: np.ndarray | None,
                     omega: np.ndarray | None = None) -> float:
    """Relative defect of <u(T), y(T)> - <u(0), y(0)> = sum_k dt <g[k], z[k]>."""
    vol, dt = grid.cell_volume, u.time_grid.dt
    lhs = vol * (u.frames[-1] @ y.frames[-1] - u.frames[0] @ y.frames[0])
    scale = vol * (np.linalg.norm(u.frames[-1]) * np.linalg.norm(y.frames[-1])
                   + np.linalg.norm(u.frames[0]) * np.linalg.norm(y.frames[0]))
    rhs = 0.0
    if steps is not None:
        z = adjoint_collocation(y)
        g = steps if omega is None else steps * omega
        rhs = vol * dt * float(np.einsum("ij,ij->", g, z))
        scale += vol * dt * float(np.linalg.norm(g) * np.linalg.norm(z))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale


@dataclass(frozen=True)
class MonotonicityReport:
    monotone: bool
    min_increment: float  # smallest (|y(t_{k+1})| - |y(t_k)|) / |y(T)|
    max_violation: float  # max(0, -min_increment)
    norms: np.ndarray

    def as_row(self) -> dict:
        return {"monotone": self.monotone, "min_increment": self.min_increment,
                "max_violation": self.max_violation}


def check_monotonicity(traj: Trajectory, grid: Grid, tol: float = 1e-10) -> MonotonicityReport:
    """The adjoint L^2 norm must be nondecreasing in forward time."""
    norms = traj.norms(grid)
    ref = norms[-1]
    if ref == 0.0:
        return MonotonicityReport(True, 0.0, 0.0, norms)
    inc = np.diff(norms) / ref
    worst = float(inc.min())
    violation = max(0.0, -worst)
    return MonotonicityReport(violation <= tol, worst, violation, norms)
