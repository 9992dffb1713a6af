"""Jacobi-preconditioned conjugate gradient used for every inner symmetric solve."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp


class SolverError(RuntimeError):
    pass


class InnerSolveDivergence(SolverError):
    pass


class IndefiniteOperator(InnerSolveDivergence):
    """Raised when CG meets a direction of nonpositive curvature."""


def default_maxiter(dim: int) -> int:
    return max(50, int(10 * math.sqrt(dim)))


def pcg(A: sp.spmatrix, b: np.ndarray, x0: np.ndarray | None = None, tol: float = 1e-10,
        maxiter: int | None = None, diag: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Solve ``A x = b`` for symmetric positive definite ``A`` to relative residual ``tol``.

    Returns ``(x, iterations)``.
    """
    n = b.shape[0]
    if maxiter is None:
        maxiter = default_maxiter(n)
    if diag is None:
        diag = A.diagonal()
    if np.any(diag <= 0):
        raise IndefiniteOperator("nonpositive diagonal entry; Jacobi preconditioner undefined")
    inv_d = 1.0 / diag
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), 0
    # iterate on b / |b| so that tiny or huge data cannot under- or overflow r.z
    b = b / bnorm
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float) / bnorm
    r = b - A @ x if x0 is not None else b.copy()
    target = tol
    if np.linalg.norm(r) <= target:
        return bnorm * x, 0
    z = inv_d * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        curv = float(p @ Ap)
        if curv <= 0.0:
            raise IndefiniteOperator(f"nonpositive curvature {curv:.3e} at CG iteration {it}")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return bnorm * x, it
        z = inv_d * r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    res = float(np.linalg.norm(b - A @ x))
    raise InnerSolveDivergence(f"CG stalled: relative residual {res:.3e} after {maxiter} iterations")
