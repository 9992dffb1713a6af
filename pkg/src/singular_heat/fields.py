"""Random and smooth nodal data.

All randomness flows from ``numpy.random.Generator(PCG64(seed))``: a 128-bit
linear congruential state with a permuted 64-bit output.  Doubles are drawn
with ``Generator.random`` / ``standard_normal``.
"""
from __future__ import annotations

import numpy as np

from .grid import Grid

MODES = 6


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, stream) so every consumer is reproducible on its own."""
    return np.random.Generator(np.random.PCG64([int(seed), int(stream)]))


def envelope(grid: Grid, x: np.ndarray | None = None) -> np.ndarray:
    """Smooth nonnegative factor vanishing on the boundary."""
    x = grid.points if x is None else np.atleast_2d(x)
    if grid.shape == "ball":
        return np.maximum(0.0, 1.0 - np.sum(x**2, axis=1) / grid.L**2)
    lo, hi = grid.box_bounds
    return np.prod(np.maximum(0.0, (hi - x) * (x - lo)), axis=1) / ((hi - lo) / 2) ** 6


def smooth_random_field(grid: Grid, rng: np.random.Generator, modes: int = MODES) -> np.ndarray:
    """envelope(x) * sum_k c_k cos(pi k . x / 2 + phase_k) with random integer wave vectors.

    The coefficients do not depend on the grid, so the same generator state gives
    the same continuum function on every resolution.
    """
    k = rng.integers(0, 3, size=(modes, 3))
    c = rng.standard_normal(modes)
    ph = rng.uniform(0.0, 2 * np.pi, modes)
    x = grid.points / grid.L
    vals = np.cos(0.5 * np.pi * x @ k.T + ph) @ c
    return envelope(grid) * vals


def nodal_noise(grid: Grid, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(grid.size)


def gaussian_blob(grid: Grid, center=(-0.3, 0.2, 0.0), width: float = 0.3) -> np.ndarray:
    d2 = np.sum((grid.points - np.asarray(center)) ** 2, axis=1)
    return envelope(grid) * np.exp(-d2 / width**2)
