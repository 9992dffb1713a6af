"""Sparse assembly of the discrete operator -div(p grad .) - V with Dirichlet data eliminated."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import Coefficient, CoefficientSpec, Grid, make_coefficient

# links shorter than this fraction of h are lengthened to it; keeps the diagonal bounded
MIN_BOUNDARY_FRACTION = 0.05


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseOperator:
    matrix: sp.csr_matrix
    symmetric: bool = True

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, v):
        return self.matrix @ v

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def asymmetry(self) -> float:
        d = self.matrix - self.matrix.T
        return float(abs(d).max()) if d.nnz else 0.0

    def gershgorin_lower(self) -> float:
        a = abs(self.matrix)
        off = np.asarray(a.sum(axis=1)).ravel() - abs(self.diagonal())
        return float(np.min(self.diagonal() - off))

    def export_coo(self, path: str | Path) -> None:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w") as fh:
            for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")


@dataclass(frozen=True)
class PotentialSpec:
    mu: float
    epsilon: float = 0.0
    cutoff_chi: np.ndarray | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.cutoff_chi is not None:
            chi = np.asarray(self.cutoff_chi)
            if chi.min() < 0 or chi.max() > 1:
                raise ValueError("cutoff must take values in [0, 1]")


def _check(grid: Grid, n: int) -> None:
    if n != grid.size:
        raise DimensionMismatch(f"field has {n} entries, grid has {grid.size} nodes")


def assemble_diffusion(grid: Grid, coeff: Coefficient) -> SparseOperator:
    """Seven-point stencil with arithmetic face averages of ``p``.

    Links that leave the ball are shortened to the boundary crossing (distance
    fraction ``t``) and contribute ``p_face / (t h^2)`` to the diagonal only, so
    the matrix stays symmetric.  On the box every ``t`` is 1.
    """
    _check(grid, coeff.p.shape[0])
    n, h2 = grid.size, grid.h**2
    p = coeff.p
    diag = np.zeros(n)
    rows, cols, vals = [], [], []
    for ax in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[ax] = 1
        for sign in (1, -1):
            nb = grid.lookup(grid.lattice + sign * e)
            inner = nb >= 0
            src = np.nonzero(inner)[0]
            dst = nb[inner]
            pf = 0.5 * (p[src] + p[dst])
            diag[src] += pf / h2
            if sign == 1:
                rows += [src, dst]
                cols += [dst, src]
                vals += [-pf / h2, -pf / h2]
            out = np.nonzero(~inner)[0]
            if len(out):
                x = grid.points[out]
                xo = x.copy()
                xo[:, ax] += sign * grid.h
                pf = 0.5 * (p[out] + coeff.at(xo))
                t = np.maximum(grid.boundary_fraction(x, ax, sign), MIN_BOUNDARY_FRACTION)
                diag[out] += pf / (t * h2)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    A.sum_duplicates()
    A.sort_indices()
    return SparseOperator(A)


def laplacian(grid: Grid) -> SparseOperator:
    """Diffusion operator for p = 1."""
    return assemble_diffusion(grid, make_coefficient(grid, CoefficientSpec("constant", 1.0)))


def potential_values(grid: Grid, spec: PotentialSpec) -> np.ndarray:
    rr = np.sum(grid.points**2, axis=1)
    if spec.cutoff_chi is not None:
        chi = np.asarray(spec.cutoff_chi, dtype=float)
        _check(grid, chi.shape[0])
        return (1.0 - chi) * spec.mu / rr
    return spec.mu / (rr + spec.epsilon**2)


def assemble_potential(grid: Grid, spec: PotentialSpec) -> SparseOperator:
    return SparseOperator(sp.diags(potential_values(grid, spec), format="csr"))


def diagonal_operator(values: np.ndarray) -> SparseOperator:
    return SparseOperator(sp.diags(np.asarray(values, dtype=float), format="csr"))


def assemble_L(diffusion: SparseOperator, potential: SparseOperator) -> SparseOperator:
    if diffusion.dimension != potential.dimension:
        raise DimensionMismatch(f"{diffusion.dimension} != {potential.dimension}")
    M = (diffusion.matrix - potential.matrix).tocsr()
    M.sort_indices()
    return SparseOperator(M, diffusion.symmetric and potential.symmetric)


def build_operator(grid: Grid, coeff: Coefficient, mu: float, epsilon: float = 0.0) -> SparseOperator:
    return assemble_L(assemble_diffusion(grid, coeff), assemble_potential(grid, PotentialSpec(mu, epsilon)))


# --- discrete norms ----------------------------------------------------------------


def l2_inner(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    return float(grid.cell_volume * (u @ v))


def l2_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(grid.cell_volume * (u @ u)))


def h1_norm(grid: Grid, u: np.ndarray, lap: SparseOperator | None = None) -> float:
    """Discrete H^1_0 norm: sqrt(<u, A u> + |u|^2) with A the p = 1 diffusion matrix."""
    if lap is None:
        lap = laplacian(grid)
    return float(np.sqrt(grid.cell_volume * (u @ (lap @ u) + u @ u)))


def restricted_h1_norm(grid: Grid, u: np.ndarray, region: np.ndarray) -> float:
    """H^1 norm over the nodes of ``region``; gradient links count only when both ends
    are in the region.  Links to eliminated boundary nodes count if the region
    touches the boundary (the boundary value is zero)."""
    region = np.asarray(region, dtype=bool)
    h = grid.h
    total = float(np.sum(u[region] ** 2))
    for ax in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[ax] = 1
        for sign in (1, -1):
            nb = grid.lookup(grid.lattice + sign * e)
            inner = nb >= 0
            if sign == 1:
                ok = inner & region
                ok[ok] &= region[nb[ok]]
                idx = np.nonzero(ok)[0]
                total += float(np.sum((u[idx] - u[nb[idx]]) ** 2)) / h**2
            bnd = (~inner) & region
            total += float(np.sum(u[bnd] ** 2)) / h**2
    return float(np.sqrt(grid.cell_volume * total))
