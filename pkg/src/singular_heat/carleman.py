"""Carleman weights and the two sides of the weighted estimate on discrete
adjoint trajectories.

psi is built per node and validated before use; sigma derivatives are analytic.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .evolution import Stepper, TimeGrid, solve_adjoint
from .grid import Grid, RegionMasks
from .operators import SparseOperator


class ValidationFailure(ValueError):
    def __init__(self, message: str, nodes: list[tuple[int, str]] | None = None):
        super().__init__(message)
        self.nodes = nodes or []


class TimeEndpoint(ValueError):
    pass


class WeightOverflow(ArithmeticError):
    pass


class DegenerateDenominator(ArithmeticError):
    pass


# --- psi ---------------------------------------------------------------------------

# derivative closure: points (k, 3) -> (psi, grad (k,3), hess (k,3,3), third (k,3,3,3))
Derivs = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


def _radial_tensors(x: np.ndarray, g: np.ndarray, g1: np.ndarray, g2: np.ndarray, g3: np.ndarray):
    """Cartesian derivatives of x -> g(|x|) up to third order."""
    rho = np.sqrt(np.sum(x**2, axis=1))
    nv = x / rho[:, None]
    eye = np.eye(3)
    nn = nv[:, :, None] * nv[:, None, :]
    grad = g1[:, None] * nv
    a = g1 / rho
    hess = g2[:, None, None] * nn + a[:, None, None] * (eye - nn)
    b = g2 / rho - g1 / rho**2
    c = g3 - 3.0 * b
    nnn = nn[:, :, :, None] * nv[:, None, None, :]
    dn = (eye[None, :, :, None] * nv[:, None, None, :]
          + eye[None, :, None, :] * nv[:, None, :, None]
          + eye[None, None, :, :] * nv[:, :, None, None])
    third = c[:, None, None, None] * nnn + b[:, None, None, None] * dn
    return g, grad, hess, third


@dataclass(frozen=True)
class RadialProfile:
    """g(rho) = ln(rho / r) below r; above r, g' = (rho* - rho) P(rho) with a quadratic
    P matching g' and g'' at r (so g is C^2) and closing with g(1) = 0."""
    r: float
    rho_star: float
    coef: tuple[float, ...]  # P(rho) = sum c_i (rho - r)^i

    @classmethod
    def build(cls, r: float, rho_star: float) -> "RadialProfile":
        if not 0 < r < rho_star < 1:
            raise ValidationFailure(f"need 0 < r < rho* < 1, got r={r}, rho*={rho_star}")
        d = rho_star - r
        # g' = (d - u) P(u), u = rho - r;  g'(0) = d c0, g''(0) = -c0 + d c1
        c0 = 1.0 / (r * d)
        c1 = (c0 - 1.0 / r**2) / d
        # g(r) = 0 and g(1) = 0 force int_0^{1-r} (d - u) P(u) du = 0
        U = 1.0 - r
        def mom(k):  # int_0^U (d - u) u^k du
            return d * U ** (k + 1) / (k + 1) - U ** (k + 2) / (k + 2)
        c2 = -(c0 * mom(0) + c1 * mom(1)) / mom(2)
        prof = cls(r, rho_star, (c0, c1, c2))
        uu = np.linspace(0.0, U, 2001)
        if np.any(prof._P(uu) <= 0):
            raise ValidationFailure(f"radial profile is not unimodal for r={r}, rho*={rho_star}")
        return prof

    def _P(self, u, k: int = 0):
        c = np.polynomial.polynomial.Polynomial(self.coef)
        return c.deriv(k)(u) if k else c(u)

    def _G(self, u):
        # antiderivative of (d - u) P(u) from 0
        d = self.rho_star - self.r
        poly = np.polynomial.polynomial.Polynomial([d, -1.0]) * np.polynomial.polynomial.Polynomial(self.coef)
        return poly.integ()(u)

    def derivs(self, rho: np.ndarray):
        rho = np.asarray(rho, dtype=float)
        g = np.empty_like(rho)
        g1, g2, g3 = np.empty_like(rho), np.empty_like(rho), np.empty_like(rho)
        ins = rho <= self.r
        ri = rho[ins]
        g[ins] = np.log(ri / self.r)
        g1[ins] = 1.0 / ri
        g2[ins] = -1.0 / ri**2
        g3[ins] = 2.0 / ri**3
        u = rho[~ins] - self.r
        d = self.rho_star - self.r
        P, P1, P2 = self._P(u), self._P(u, 1), self._P(u, 2)
        g[~ins] = self._G(u)
        g1[~ins] = (d - u) * P
        g2[~ins] = -P + (d - u) * P1
        g3[~ins] = -2.0 * P1 + (d - u) * P2
        return g, g1, g2, g3

    @property
    def sup(self) -> float:
        return float(self.derivs(np.array([self.rho_star]))[0][0])

    def tensors(self, x: np.ndarray):
        x = np.atleast_2d(x)
        rho = np.sqrt(np.sum(x**2, axis=1))
        return _radial_tensors(x, *self.derivs(rho))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    """C-infinity transition: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class BlendedPsi:
    """ln(|x|/r) near the origin blended into K (1 - |x|^2) exp(-|x - c|^2 / 2R^2)."""
    r: float
    r_blend: float
    center: tuple[float, float, float]
    R: float
    K: float

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.sqrt(np.sum(x**2, axis=1))
        a = 1.0 - _smoothstep((rho - self.r) / (self.r_blend - self.r))
        bump = self.K * (1.0 - rho**2) * np.exp(-np.sum((x - np.asarray(self.center)) ** 2, axis=1) / (2 * self.R**2))
        with np.errstate(divide="ignore"):
            ln = np.log(np.maximum(rho, 1e-300) / self.r)
        return np.where(a > 0, a * ln, 0.0) + (1.0 - a) * bump

    def tensors(self, x: np.ndarray, step: float = 2e-3):
        """Fourth-order central differences of the closed-form field."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = len(x)
        eye = np.eye(3) * step
        f = self.value
        w1 = np.array([1.0, -8.0, 8.0, -1.0]) / (12 * step)
        offs = (-2, -1, 1, 2)

        def grad_of(fun, pts):
            return np.stack([sum(w * fun(pts + o * eye[i]) for w, o in zip(w1, offs)) for i in range(3)], axis=-1)

        grad = grad_of(f, x)
        hess = np.stack([sum(w * grad_of(f, x + o * eye[i]) for w, o in zip(w1, offs)) for i in range(3)], axis=1)
        third = np.zeros((k, 3, 3, 3))
        for i in range(3):
            for o, w in zip(offs, w1):
                xi = x + o * eye[i]
                third[:, i] += w * np.stack(
                    [sum(ww * grad_of(f, xi + oo * eye[j]) for ww, oo in zip(w1, offs)) for j in range(3)], axis=1)
        hess = 0.5 * (hess + hess.transpose(0, 2, 1))
        return f(x), grad, hess, third


@dataclass(frozen=True, eq=False)
class PsiField:
    mode: str
    values: np.ndarray  # nodal psi
    grad_norm: np.ndarray  # nodal |grad psi|
    delta: float  # min |grad psi| over nodes outside omega0
    sup: float
    r: float
    source: RadialProfile | BlendedPsi = field(repr=False)
    violations: list = field(default_factory=list, repr=False)

    @property
    def valid(self) -> bool:
        return not self.violations

    def tensors(self, x: np.ndarray):
        return self.source.tensors(x)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if isinstance(self.source, RadialProfile):
            return self.source.derivs(np.sqrt(np.sum(x**2, axis=1)))[0]
        return self.source.value(x)


def _validate(grid: Grid, masks: RegionMasks, values: np.ndarray, grad_norm: np.ndarray,
              r: float, boundary_value: float, delta_floor: float) -> list[tuple[int, str]]:
    bad: list[tuple[int, str]] = []
    rho = grid.radius
    inball = rho < r
    ref = np.log(rho[inball] / r)
    for i in np.nonzero(inball)[0][np.abs(values[inball] - ref) > 1e-10 * (1 + np.abs(ref))]:
        bad.append((int(i), "psi differs from ln(|x|/r) in B_r"))
    for i in np.nonzero((rho > r) & (values <= 0))[0]:
        bad.append((int(i), "psi <= 0 outside the closed singular ball"))
    for i in np.nonzero(~masks.omega0 & (grad_norm < delta_floor))[0]:
        bad.append((int(i), f"|grad psi| = {grad_norm[i]:.3g} < {delta_floor} outside omega0"))
    if abs(boundary_value) > 1e-10:
        bad.append((-1, f"psi = {boundary_value:.3g} on the boundary"))
    return bad


def build_psi(grid: Grid, masks: RegionMasks, mode: str = "radial", delta_floor: float = 1e-3,
              strict: bool = True) -> PsiField:
    """Construct and validate the weight function psi on the grid nodes.

    With ``strict`` a failed validation raises ValidationFailure carrying every
    violated node; otherwise the violations are attached to the returned field.
    """
    if masks.r is None:
        raise ValidationFailure("masks carry no singular ball radius")
    r = masks.r
    spec = masks.omega_spec
    if mode == "radial":
        if spec.kind != "annulus":
            raise ValidationFailure("radial psi needs an annular control region")
        prof = RadialProfile.build(r, 0.5 * (spec.inner + spec.outer))
        g, g1, _, _ = prof.derivs(grid.radius)
        values, grad_norm = g, np.abs(g1)
        boundary = float(prof.derivs(np.array([1.0]))[0][0])
        sup, source = prof.sup, prof
    elif mode == "blended":
        if spec.kind != "ball":
            raise ValidationFailure("blended psi is built for a ball control region")
        c = np.asarray(spec.center, dtype=float)
        dist = float(np.linalg.norm(c))
        R = 0.8
        # shift the bump so that the maximum of (1 - |x|^2) exp(...) lands on the centre of omega
        shifted = c / dist * (dist + (1 - dist**2) ** -1 * 2 * dist * R**2)
        r_blend = r + 0.5 * (spec.distance_from_origin() - r)
        source = BlendedPsi(r, r_blend, tuple(shifted), R, 1.0)
        values = source.value(grid.points)
        _, grad, _, _ = source.tensors(grid.points)
        grad_norm = np.sqrt(np.sum(grad**2, axis=1))
        unit = np.array([[1.0, 0.0, 0.0]])
        boundary = float(np.max(np.abs(source.value(np.vstack([unit, -unit, np.roll(unit, 1, axis=1)])))))
        sup = float(values.max())
    else:
        raise ValueError(f"unknown psi mode {mode!r}")
    bad = _validate(grid, masks, values, grad_norm, r, boundary, delta_floor)
    outside = ~masks.omega0
    delta = float(grad_norm[outside].min()) if outside.any() else float("inf")
    psi = PsiField(mode, values, grad_norm, delta, sup, r, source, bad)
    if bad and strict:
        raise ValidationFailure(f"{mode} psi failed validation at {len(bad)} nodes", bad)
    return psi


# --- weights -----------------------------------------------------------------------


def lambda_min(sup_psi: float) -> float:
    """Smallest lambda with e^{2 lambda S} - 1/2 - e^{lambda S} > 0, i.e. sigma > 0 on the unit ball."""
    return math.log((1.0 + math.sqrt(3.0)) / 2.0) / sup_psi


@dataclass(frozen=True, eq=False)
class WeightSystem:
    s: float
    lam: float
    gamma: float
    T: float
    psi: PsiField

    def __post_init__(self):
        if not 0 < self.gamma < 2:
            raise ValueError(f"gamma must lie in (0, 2), got {self.gamma}")
        if self.s <= 0 or self.lam <= 0 or self.T <= 0:
            raise ValueError("s, lambda and T must be positive")

    @property
    def k0(self) -> float:
        return 1.0 + 2.0 / self.gamma

    @property
    def r(self) -> float:
        return self.psi.r

    @property
    def delta(self) -> float:
        return self.psi.delta

    @property
    def sup_psi(self) -> float:
        return self.psi.sup

    @property
    def top(self) -> float:
        return math.exp(2.0 * self.lam * self.sup_psi)

    def with_s(self, s: float) -> "WeightSystem":
        return WeightSystem(s, self.lam, self.gamma, self.T, self.psi)

    def theta(self, t):
        t = np.asarray(t, dtype=float)
        if np.any((t <= 0) | (t >= self.T)):
            raise TimeEndpoint(f"weights are singular at t in {{0, T}}; got {t}")
        return (t * (self.T - t)) ** (-self.k0)

    def dtheta(self, t):
        t = np.asarray(t, dtype=float)
        return -self.k0 * (t * (self.T - t)) ** (-self.k0 - 1) * (self.T - 2 * t)

    def spatial(self, psi_vals: np.ndarray, rr: np.ndarray) -> np.ndarray:
        """e^{2 lambda sup psi} - |x|^2/2 - phi."""
        return self.top - 0.5 * rr - np.exp(self.lam * psi_vals)


def eval_weights(ws: WeightSystem, x, t: float):
    """(theta, phi, sigma) at points ``x`` and time ``t``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    th = ws.theta(t)
    psi = ws.psi.value(x)
    phi = np.exp(ws.lam * psi)
    sigma = ws.s * th * ws.spatial(psi, np.sum(x**2, axis=1))
    return th, phi, sigma


@dataclass(frozen=True, eq=False)
class WeightDerivatives:
    dt: np.ndarray  # (k,)
    grad: np.ndarray  # (k, 3)
    hess: np.ndarray  # (k, 3, 3)
    third: np.ndarray  # (k, 3, 3, 3)

    @property
    def grad_laplacian(self) -> np.ndarray:
        return np.einsum("kjji->ki", self.third)

    @property
    def laplacian(self) -> np.ndarray:
        return np.einsum("kjj->k", self.hess)


def weight_derivatives(ws: WeightSystem, x, t: float) -> WeightDerivatives:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    th = ws.theta(t)
    psi, g1, g2, g3 = ws.psi.tensors(x)
    lam, s = ws.lam, ws.s
    phi = np.exp(lam * psi)
    eye = np.eye(3)
    sd = s * ws.dtheta(t) * ws.spatial(psi, np.sum(x**2, axis=1))
    grad = -s * th * (x + lam * phi[:, None] * g1)
    outer = g1[:, :, None] * g1[:, None, :]
    hess = -s * th * (eye + lam * phi[:, None, None] * g2 + lam**2 * phi[:, None, None] * outer)
    mix = (g1[:, :, None, None] * g2[:, None, :, :] + g1[:, None, :, None] * g2[:, :, None, :]
           + g1[:, None, None, :] * g2[:, :, :, None])
    ggg = outer[:, :, :, None] * g1[:, None, None, :]
    third = -s * th * phi[:, None, None, None] * (lam * g3 + lam**2 * mix + lam**3 * ggg)
    return WeightDerivatives(sd, grad, hess, third)


# --- both sides of the estimate -------------------------------------------------------

LHS_NAMES = ("grad_phi", "grad", "hardy_gamma", "x2", "phi3", "wt_ball", "wt_phi")


@dataclass(frozen=True)
class CarlemanReport:
    lhs_terms: tuple[float, ...]
    rhs_observation: float
    rhs_source: float
    ratio: float
    s: float
    lam: float
    gamma: float
    k0: float
    grid_id: str
    log_scale: float  # every term is multiplied by e^{log_scale}
    time_window: tuple[float, float]

    def as_row(self) -> dict:
        row = {"s": self.s, "lambda": self.lam, "gamma": self.gamma, "k0": self.k0}
        row.update({f"lhs_{n}": v for n, v in zip(LHS_NAMES, self.lhs_terms)})
        row.update({"rhs_obs": self.rhs_observation, "rhs_src": self.rhs_source, "C_est": self.ratio,
                    "log_scale": self.log_scale})
        return row


CARLEMAN_COLUMNS = (["s", "lambda", "gamma", "k0"] + [f"lhs_{n}" for n in LHS_NAMES]
                    + ["rhs_obs", "rhs_src", "C_est", "log_scale"])


def _nodal_grad_sq(grid: Grid, w: np.ndarray) -> np.ndarray:
    """|grad w|^2 at each node: mean of squared one-sided differences per axis (zero outside)."""
    out = np.zeros(w.shape)
    h = grid.h
    for ax in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[ax] = 1
        for sign in (1, -1):
            nb = grid.lookup(grid.lattice + sign * e)
            wn = np.where(nb >= 0, w[..., np.maximum(nb, 0)], 0.0)
            out += 0.5 * ((wn - w) / h) ** 2
    return out


def _scaled_damping(ws: WeightSystem, grid: Grid, tg: TimeGrid, underflow: float = 700.0):
    """e^{-2 sigma + min 2 sigma} on interior time nodes, with the nodes that carry weight."""
    if tg.N < 4:
        raise WeightOverflow("need at least three interior time nodes")
    t = tg.times[1:-1]
    rr = np.sum(grid.points**2, axis=1)
    two_sigma = 2.0 * ws.s * ws.theta(t)[:, None] * ws.spatial(ws.psi.values, rr)[None, :]
    shift = float(two_sigma.min())
    expo = two_sigma - shift
    alive = np.any(expo < underflow, axis=1)
    if alive.sum() < 3:
        raise WeightOverflow(f"e^(-2 sigma) is negligible on all but {int(alive.sum())} time nodes; lower s")
    E = np.where(expo < underflow, np.exp(-np.minimum(expo, underflow)), 0.0)
    return t, shift, E, alive


def usable_window(ws: WeightSystem, grid: Grid, tg: TimeGrid, underflow: float = 700.0) -> tuple[float, float]:
    """First and last interior time node on which the scaled weight is representable."""
    t, _, _, alive = _scaled_damping(ws, grid, tg, underflow)
    return float(t[alive].min()), float(t[alive].max())


def carleman_sides(ws: WeightSystem, masks: RegionMasks, grid: Grid, traj, g=None,
                   underflow: float = 700.0) -> CarlemanReport:
    """Evaluate the seven left-hand integrals and the two right-hand integrals.

    Time integrals use the interior nodes only (the integrands vanish at the
    endpoints).  All terms are scaled by the common factor e^{min 2 sigma}, which
    leaves the ratio unchanged and keeps the weights representable.
    """
    tg = traj.time_grid
    t, shift, E, alive = _scaled_damping(ws, grid, tg, underflow)
    dt = tg.dt
    w = traj.frames[1:-1]
    wt = (traj.frames[2:] - traj.frames[:-2]) / (2 * dt)
    rr = np.sum(grid.points**2, axis=1)
    rho = np.sqrt(rr)
    lam, s = ws.lam, ws.s
    phi = np.exp(lam * ws.psi.values)
    th = ws.theta(t)[:, None]
    live_t = t[alive]
    vol = grid.cell_volume * dt
    theta_tilde = rho > ws.r
    ball = ~theta_tilde
    omega = masks.omega
    if traj.frames.ndim != 2:
        raise ValueError("trajectory frames must be two-dimensional")
    gsq = _nodal_grad_sq(grid, w)
    ww = w * w
    wt2 = wt * wt
    damp = math.exp(-4.0 * lam * ws.sup_psi)

    def integ(f, region=None):
        if region is not None:
            f = f[:, region]
        return float(vol * np.sum(f))

    terms = (
        s * lam**2 * integ(th * phi * E * gsq, theta_tilde),
        s / lam**2 * integ(th * E * gsq),
        s * integ(th * E * ww / rho**ws.gamma),
        s**3 * integ(th**3 * E * rr * ww),
        s**3 * lam**4 * integ(th**3 * phi**3 * E * ww, theta_tilde),
        damp / s * integ(E * wt2 / th, ball),
        damp / s * integ(E * wt2 / (th * phi), theta_tilde),
    )
    rhs_obs = s**3 * lam**4 * ws.top * integ(th**3 * phi**3 * E * ww, omega)
    rhs_src = 0.0
    if g is not None:
        gg = g.frames[1:-1] if hasattr(g, "frames") else np.asarray(g)[1:-1]
        rhs_src = integ(E * gg * gg)
    denom = rhs_obs + rhs_src
    lhs = float(sum(terms))
    if denom == 0.0:
        ratio = 0.0 if lhs == 0.0 else math.inf
    else:
        ratio = lhs / denom
    return CarlemanReport(tuple(terms), rhs_obs, rhs_src, ratio, s, lam, ws.gamma, ws.k0,
                          f"m{grid.m}", -shift, (float(live_t.min()), float(live_t.max())))


def write_carleman_csv(path: str | Path, reports: list[CarlemanReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CARLEMAN_COLUMNS)
        for rep in reports:
            row = rep.as_row()
            w.writerow([f"{row[c]:.10g}" for c in CARLEMAN_COLUMNS])


def default_lambda(psi: PsiField) -> float:
    return max(1.0, 2.0 * lambda_min(psi.sup))


def default_s0(psi: PsiField, lam: float, T: float, gamma: float = 1.0, grid: Grid | None = None,
               budget: float = 600.0) -> float:
    """s with max_x 2 sigma(x, T/2) equal to ``budget``."""
    k0 = 1.0 + 2.0 / gamma
    th_mid = (T * T / 4.0) ** (-k0)
    top = math.exp(2.0 * lam * psi.sup)
    if grid is not None:
        spatial = top - 0.5 * np.sum(grid.points**2, axis=1) - np.exp(lam * psi.values)
        peak = float(spatial.max())
    else:
        peak = top
    return budget / (2.0 * th_mid * peak)


# --- reference constants -------------------------------------------------------------


def reference_constants(p1: float, p2: float, p3: float, mu: float, r: float, delta: float,
                        n: int = 3) -> dict[str, float]:
    mu_star = (n - 2) ** 2 / 4.0
    return {
        "C0": p1**2 * delta**2 / (2 * n),
        "C1": 2 * p1**2 - 3 * p1 * p3 * r - 2 * p2 * mu / mu_star,
        "C2": 2 * p2 * mu / mu_star,
        "C7": 0.5 * p1**2 * delta**4,
        "C8": 2.0 / 3.0 * p2 * mu / mu_star,
    }


# --- observability --------------------------------------------------------------------


def observability_constant(L: SparseOperator, masks: RegionMasks, tg: TimeGrid, trials: int = 3,
                           block: int = 4, power_steps: int = 4, seed: int = 0,
                           cell_volume: float = 1.0) -> float:
    """Largest Ritz value of |y(0)|^2 / |y|^2_{omega x (0,T)} over power-iterated subspaces.

    Every returned value is attained by an explicit terminal datum, so it is a
    lower bound on the observability constant.
    """
    from .evolution import adjoint_collocation  # local: keeps import order flat

    rng = np.random.default_rng(seed)
    stepper = Stepper(L, tg)
    n = L.dimension
    omega = masks.omega.astype(float)
    best = 0.0
    for _ in range(trials):
        V = rng.standard_normal((n, block))
        V, _ = np.linalg.qr(V)
        for it in range(power_steps + 1):
            Y0 = np.empty_like(V)
            Z = []
            for j in range(block):
                y = solve_adjoint(L, V[:, j], tg, stepper)
                Y0[:, j] = y.frames[0]
                Z.append(adjoint_collocation(y) * omega)
            if it < power_steps:
                V, _ = np.linalg.qr(Y0)
                continue
            E = cell_volume * Y0.T @ Y0
            G = np.array([[cell_volume * tg.dt * float(np.einsum("ij,ij->", Z[a], Z[b]))
                           for b in range(block)] for a in range(block)])
            gv, gq = np.linalg.eigh(0.5 * (G + G.T))
            keep = gv > 1e-13 * max(gv.max(), 0.0)
            if not keep.any():
                raise DegenerateDenominator("omega energy vanishes on the trial subspace; restart")
            W = gq[:, keep] / np.sqrt(gv[keep])
            q = np.linalg.eigvalsh(W.T @ E @ W)
            best = max(best, float(q.max()))
    return best


# --- finite-difference consistency ------------------------------------------------------


def derivative_scales(ws: WeightSystem, x, t: float) -> np.ndarray:
    """Magnitude of the summands of each derivative formula, (k, 4) for (t, grad, hess, third).

    Errors are measured against these rather than against the derivative itself,
    which vanishes on the critical sphere of sigma.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    psi, g1, g2, g3 = ws.psi.tensors(x)
    lam, s = ws.lam, ws.s
    phi = np.exp(lam * psi)
    st = s * ws.theta(t)
    n1 = np.linalg.norm(g1, axis=1)
    n2 = np.linalg.norm(g2, axis=(1, 2))
    n3 = np.sqrt(np.sum(g3**2, axis=(1, 2, 3)))
    rr = np.sum(x**2, axis=1)
    return np.stack([
        s * np.abs(ws.dtheta(t)) * (ws.top + 0.5 * rr + phi),
        st * (np.sqrt(rr) + lam * phi * n1),
        st * (math.sqrt(3.0) + lam * phi * n2 + lam**2 * phi * n1**2),
        st * phi * (lam * n3 + 3 * lam**2 * n1 * n2 + lam**3 * n1**3),
    ], axis=1)


def fd_errors(ws: WeightSystem, x, t: float, step: float) -> np.ndarray:
    """Scaled central-difference errors of (d_t sigma, grad, Hessian, third derivatives).

    First derivatives difference sigma itself; the Hessian differences the
    analytic gradient and the third-order tensor differences the analytic Hessian.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    an = weight_derivatives(ws, x, t)
    sig = lambda y, tt: eval_weights(ws, y, tt)[2][0]
    E = np.eye(3) * step
    dt_fd = (sig(x, t + step) - sig(x, t - step)) / (2 * step)
    g_fd = np.array([(sig(x + E[i], t) - sig(x - E[i], t)) / (2 * step) for i in range(3)])
    plus = [weight_derivatives(ws, x + E[i], t) for i in range(3)]
    minus = [weight_derivatives(ws, x - E[i], t) for i in range(3)]
    h_fd = np.array([(p.grad[0] - m.grad[0]) / (2 * step) for p, m in zip(plus, minus)])
    t_fd = np.array([(p.hess[0] - m.hess[0]) / (2 * step) for p, m in zip(plus, minus)])
    raw = np.array([
        abs(dt_fd - an.dt[0]),
        np.linalg.norm(g_fd - an.grad[0]),
        np.linalg.norm(h_fd - an.hess[0]),
        np.sqrt(np.sum((t_fd - an.third[0]) ** 2)),
    ])
    return raw / derivative_scales(ws, x, t)[0]


def sample_points(rng: np.random.Generator, count: int, ws: WeightSystem, window: tuple[float, float],
                  rho_min: float = 0.05, rho_max: float = 0.97, avoid: float = 0.02):
    """Uniform samples in the ball shell away from the seam |x| = r, times in ``window``."""
    pts = []
    while len(pts) < count:
        x = rng.uniform(-1.0, 1.0, 3)
        rho = float(np.linalg.norm(x))
        if rho_min < rho < rho_max and abs(rho - ws.r) > avoid:
            pts.append(x)
    return np.array(pts), rng.uniform(window[0], window[1], count)
