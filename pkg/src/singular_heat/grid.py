"""Cartesian discretization of the domain, subdomain masks and the diffusion coefficient.

Lattice points sit at ``(j + 1/2) h`` along every axis, so the origin always
falls at a cell center and never on a node.  For the box the domain is the
shifted cube whose faces pass through lattice planes; for the ball it is
``|x| < L``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DIM = 3
SHAPES = ("ball", "box")


class GridError(ValueError):
    pass


class SeparationViolation(GridError):
    pass


class EmptyRegion(GridError):
    pass


class NonPositiveCoefficient(GridError):
    pass


class MuOutOfRange(ValueError):
    pass


def hardy_mu_star(n: int = DIM) -> float:
    """Optimal Hardy constant (n - 2)^2 / 4."""
    return (n - 2) ** 2 / 4.0


@dataclass(frozen=True, eq=False)
class Grid:
    L: float
    m: int
    shape: str
    h: float
    node_offset: float
    lattice: np.ndarray  # (N, 3) integer lattice coordinates j of interior nodes
    points: np.ndarray  # (N, 3) coordinates
    index: np.ndarray  # 3-D array lattice -> dense index, -1 outside
    lo: int  # lattice coordinate stored at index[0, 0, 0]
    n: int = DIM

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.points, self.points))

    @property
    def cell_volume(self) -> float:
        return self.h**3

    def coords(self, j: np.ndarray) -> np.ndarray:
        return (np.asarray(j, dtype=float) + 0.5) * self.h

    def lookup(self, j: np.ndarray) -> np.ndarray:
        """Dense indices for lattice coordinates ``j`` (shape (..., 3)); -1 if not interior."""
        k = np.asarray(j) - self.lo
        ok = np.all((k >= 0) & (k < self.index.shape[0]), axis=-1)
        out = np.full(k.shape[:-1], -1, dtype=np.int64)
        kk = k[ok]
        out[ok] = self.index[kk[:, 0], kk[:, 1], kk[:, 2]]
        return out

    def inside(self, x: np.ndarray) -> np.ndarray:
        """Membership of arbitrary points in the open domain."""
        x = np.asarray(x, dtype=float)
        if self.shape == "ball":
            return np.sqrt(np.sum(x**2, axis=-1)) < self.L
        lo, hi = self.box_bounds
        return np.all((x > lo) & (x < hi), axis=-1)

    @property
    def box_bounds(self) -> tuple[float, float]:
        half = self.m // 2
        return (-half + 0.5) * self.h, (self.m - half + 0.5) * self.h

    def boundary_fraction(self, x: np.ndarray, axis: int, sign: int) -> np.ndarray:
        """Fraction in (0, 1] of a lattice link from ``x`` toward ``x + sign h e_axis``
        that lies inside the domain (1 for box faces, which sit on lattice planes)."""
        if self.shape == "box":
            return np.ones(len(x))
        a = x[:, axis]
        # positive root t of |x + sign t e_axis| = L
        t = -sign * a + np.sqrt(np.maximum(a**2 - (np.sum(x**2, axis=1) - self.L**2), 0.0))
        return np.clip(t / self.h, 0.0, 1.0)

    def summary(self) -> dict:
        r = self.radius
        return {
            "n": self.n,
            "m": self.m,
            "L": self.L,
            "shape": self.shape,
            "h": self.h,
            "node_offset": self.node_offset,
            "interior_nodes": self.size,
            "min_radius": float(r.min()),
            "potential_ceiling": float(1.0 / r.min() ** 2),
        }


def build_grid(L: float, m: int, shape: str = "ball") -> Grid:
    if m < 8:
        raise GridError(f"m={m} is too coarse; need m >= 8")
    if not L > 0:
        raise GridError(f"half width must be positive, got L={L}")
    if shape not in SHAPES:
        raise GridError(f"unknown domain shape {shape!r}; expected one of {SHAPES}")
    h = 2.0 * L / m
    half = m // 2
    lo, hi = -half - 1, m - half + 1
    j = np.arange(lo, hi + 1)
    J = np.stack(np.meshgrid(j, j, j, indexing="ij"), axis=-1).reshape(-1, 3)
    X = (J + 0.5) * h
    if shape == "ball":
        keep = np.sqrt(np.sum(X**2, axis=1)) < L
    else:
        keep = np.all((J > -half) & (J < m - half), axis=1)
    lattice = J[keep]
    points = X[keep]
    index = -np.ones((len(j),) * 3, dtype=np.int64)
    k = lattice - lo
    index[k[:, 0], k[:, 1], k[:, 2]] = np.arange(len(lattice))
    grid = Grid(L=float(L), m=int(m), shape=shape, h=h, node_offset=h / 2, lattice=lattice,
                points=points, index=index, lo=lo)
    if not grid.inside(np.zeros(3)):
        raise GridError("domain does not contain the origin")
    return grid


# --- region masks -----------------------------------------------------------------


@dataclass(frozen=True)
class OmegaSpec:
    kind: str  # "ball" | "annulus"
    center: tuple[float, float, float] = (0.6, 0.0, 0.0)
    radius: float = 0.15
    inner: float = 0.55
    outer: float = 0.75

    def contains(self, x: np.ndarray, margin: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "ball":
            d = np.sqrt(np.sum((x - np.asarray(self.center)) ** 2, axis=1))
            return d < self.radius - margin
        if self.kind == "annulus":
            rho = np.sqrt(np.sum(x**2, axis=1))
            return (rho > self.inner + margin) & (rho < self.outer - margin)
        raise GridError(f"unknown omega kind {self.kind!r}")

    @property
    def width(self) -> float:
        return 2 * self.radius if self.kind == "ball" else self.outer - self.inner

    def distance_from_origin(self) -> float:
        """Distance from the origin to the closure of the region (0 if it contains it)."""
        if self.kind == "ball":
            return max(float(np.linalg.norm(self.center)) - self.radius, 0.0)
        return self.inner

    def contains_origin(self) -> bool:
        return self.distance_from_origin() <= 0.0


@dataclass(frozen=True, eq=False)
class RegionMasks:
    omega: np.ndarray
    omega0: np.ndarray
    ball_r: np.ndarray
    r: float | None
    omega_spec: OmegaSpec
    separation: float  # min node distance between B_r and omega (inf without B_r)
    continuous_separation: float

    def summary(self) -> dict:
        return {
            "omega_kind": self.omega_spec.kind,
            "omega_nodes": int(self.omega.sum()),
            "omega0_nodes": int(self.omega0.sum()),
            "ball_r_nodes": int(self.ball_r.sum()),
            "r": self.r,
            "separation": self.separation,
            "continuous_separation": self.continuous_separation,
        }


def _min_pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    best = np.inf
    for chunk in np.array_split(a, max(1, len(a) // 512)):
        d = np.sum((chunk[:, None, :] - b[None, :, :]) ** 2, axis=2)
        best = min(best, float(d.min()))
    return float(np.sqrt(best))


def make_masks(grid: Grid, omega_spec: OmegaSpec, r: float | None = None,
               require_origin_outside: bool = True) -> RegionMasks:
    """Node masks for the control region, its shrunken core and the singular ball.

    ``r=None`` skips the singular ball (runs that do not use the weight system).
    """
    x = grid.points
    omega = omega_spec.contains(x)
    if not omega.any():
        raise EmptyRegion(f"omega {omega_spec} captures no node at m={grid.m}")
    margin = min(grid.h, omega_spec.width / 4)
    omega0 = omega_spec.contains(x, margin=margin) & omega
    if require_origin_outside and omega_spec.contains_origin():
        raise SeparationViolation("the control region contains the origin")
    if r is None:
        ball = np.zeros(grid.size, dtype=bool)
        return RegionMasks(omega, omega0, ball, None, omega_spec, float("inf"),
                           omega_spec.distance_from_origin())
    if not 0 < r < 1:
        raise SeparationViolation(f"r must lie in (0, 1), got {r}")
    cont = omega_spec.distance_from_origin() - r
    if cont <= 0:
        raise SeparationViolation(f"closed ball B(0, {r}) meets the control region")
    if grid.shape == "ball" and r >= grid.L:
        raise SeparationViolation("B(0, r) is not contained in the domain")
    ball = grid.radius < r
    sep = _min_pair_distance(x[ball], x[omega])
    if sep < 2 * grid.h * (1 - 1e-12):
        raise SeparationViolation(
            f"node separation {sep:.4g} between B_r and omega is below 2h = {2 * grid.h:.4g}")
    return RegionMasks(omega, omega0, ball, float(r), omega_spec, sep, cont)


def geometry_cap(omega_spec: OmegaSpec, h: float) -> float:
    """Largest singular-ball radius that keeps a 2h gap to the control region."""
    return max(omega_spec.distance_from_origin() - 2 * h, 0.0)


# --- coefficient -------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSpec:
    kind: str = "constant"  # "constant" | "bump"
    value: float = 1.0
    amplitude: float = 0.2
    width: float = 0.5

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "constant":
            return np.full(len(x), float(self.value))
        if self.kind == "bump":
            rr = np.sum(x**2, axis=1)
            return self.value + self.amplitude * np.exp(-rr / self.width**2)
        raise GridError(f"unknown coefficient kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class Coefficient:
    p: np.ndarray
    p1: float
    p2: float
    p3: float
    spec: CoefficientSpec
    at: Callable[[np.ndarray], np.ndarray] = field(repr=False)


def make_coefficient(grid: Grid, spec: CoefficientSpec) -> Coefficient:
    p = spec.evaluate(grid.points)
    if np.any(p <= 0):
        raise NonPositiveCoefficient(f"{int(np.sum(p <= 0))} nodes with p <= 0")
    h = grid.h
    grad2 = np.zeros(grid.size)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        d = (spec.evaluate(grid.points + e) - spec.evaluate(grid.points - e)) / (2 * h)
        grad2 += d**2
    return Coefficient(p=p, p1=float(p.min()), p2=float(p.max()), p3=float(np.sqrt(grad2.max())),
                       spec=spec, at=spec.evaluate)


def admissible_r(coeff: Coefficient, mu: float, cap: float = 1.0, n: int = DIM) -> float:
    """Largest r < 1 with 2 p1^2 - 2 p2 mu / mu* > 3 p1 p3 r, with a 10% safety margin."""
    p1, p2, p3 = coeff.p1, coeff.p2, coeff.p3
    ms = hardy_mu_star(n)
    if mu < 0 or mu >= p1**2 / p2 * ms:
        raise MuOutOfRange(f"mu={mu} outside [0, p1^2/p2 mu*) = [0, {p1**2 / p2 * ms:.6g})")
    slack = 2 * p1**2 - 2 * p2 * mu / ms
    r = min(0.99, 0.99 * cap)
    if p3 > 0:
        r = min(r, 0.9 * slack / (3 * p1 * p3))
    return r


# --- binary dump -------------------------------------------------------------------

_MAGIC = b"SHGD"


def dump_grid(path: str | Path, grid: Grid, masks: RegionMasks | None = None) -> None:
    arrays = {"lattice": grid.lattice.astype("<i4")}
    if masks is not None:
        for name in ("omega", "omega0", "ball_r"):
            arrays[name] = getattr(masks, name).astype("u1")
    header = {
        "n": grid.n, "m": grid.m, "L": grid.L, "offset": grid.node_offset, "shape": grid.shape,
        "r": None if masks is None else masks.r,
        "arrays": [{"name": k, "dtype": v.dtype.str, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def load_grid_dump(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise GridError(f"{path}: not a grid dump")
    (size,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + size])
    pos = 8 + size
    arrays = {}
    for a in header["arrays"]:
        dt = np.dtype(a["dtype"])
        count = int(np.prod(a["shape"]))
        arrays[a["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(a["shape"])
        pos += count * dt.itemsize
    return header, arrays
