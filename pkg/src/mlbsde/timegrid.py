"""Nested dyadic time grids and the fine-to-coarse index map."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GridFamily:
    """Refining family of grids with points ``t_i = T - T (1 - i/2^k)^(1/beta)``.

    ``beta = 1`` is the uniform grid. Smaller ``beta`` concentrates points
    near the horizon.
    """

    horizon: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @classmethod
    def uniform(cls, horizon: float = 1.0) -> "GridFamily":
        return cls(horizon=horizon, beta=1.0)

    @classmethod
    def graded(cls, beta: float, horizon: float = 1.0) -> "GridFamily":
        return cls(horizon=horizon, beta=beta)

    @property
    def is_uniform(self) -> bool:
        return self.beta == 1.0

    def grid(self, k: int) -> "TimeGrid":
        return build_grid(self, k)


@dataclass(frozen=True)
class TimeGrid:
    family: GridFamily
    level: int
    points: np.ndarray = field(repr=False)

    @property
    def n_steps(self) -> int:
        return 2**self.level

    @property
    def horizon(self) -> float:
        return self.family.horizon

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.points)

    def coarse(self) -> "TimeGrid":
        if self.level == 0:
            raise ValueError("level-0 grid has no coarser grid")
        return build_grid(self.family, self.level - 1)

    def alpha(self, i: int) -> int:
        return alpha(self, i)


def _graded_points(horizon: float, beta: float, k: int) -> np.ndarray:
    n = 2**k
    # i / 2^k is exact in binary, so even indices of level k reproduce level k-1 bit for bit
    frac = np.arange(n + 1, dtype=float) / n
    if beta == 1.0:
        pts = horizon * frac
    else:
        pts = horizon - horizon * (1.0 - frac) ** (1.0 / beta)
    pts[0] = 0.0
    pts[-1] = horizon
    # monotone clamp against rounding at the right end
    return np.minimum(np.maximum.accumulate(pts), horizon)


@lru_cache(maxsize=256)
def _cached_grid(horizon: float, beta: float, k: int) -> TimeGrid:
    pts = _graded_points(horizon, beta, k)
    pts.setflags(write=False)
    return TimeGrid(GridFamily(horizon, beta), k, pts)


def build_grid(family: GridFamily, k: int) -> TimeGrid:
    if k < 0:
        raise ValueError(f"level must be nonnegative, got {k}")
    return _cached_grid(float(family.horizon), float(family.beta), int(k))


def alpha(grid: TimeGrid, i: int) -> int:
    """Largest coarse index j with ``t^(k-1)_j <= t^(k)_i`` (binary search on times)."""
    if grid.level < 1:
        raise ValueError("alpha needs a grid of level >= 1")
    if not 0 <= i <= grid.n_steps:
        raise IndexError(f"index {i} outside 0..{grid.n_steps}")
    coarse = grid.coarse().points
    return int(np.searchsorted(coarse, grid.points[i], side="right") - 1)


def alpha_array(grid: TimeGrid) -> np.ndarray:
    coarse = grid.coarse().points
    return np.searchsorted(coarse, grid.points, side="right") - 1


@dataclass(frozen=True)
class GridDiagnostics:
    C_pi: float
    R_pi: float


def grid_diagnostics(family: GridFamily, k: int, theta_L: float = 1.0) -> GridDiagnostics:
    """``C_pi = sup_i D_i / (T - t_i)^(1-theta_L)`` and ``R_pi = sup_i D_i / D_{i+1}``."""
    if k < 1:
        raise ValueError("diagnostics need k >= 1")
    if not (0.0 < theta_L <= 1.0):
        raise ValueError(f"theta_L must lie in (0, 1], got {theta_L}")
    g = build_grid(family, k)
    dt = g.increments
    remaining = family.horizon - g.points[:-1]
    c_pi = float(np.max(dt / remaining ** (1.0 - theta_L)))
    r_pi = float(np.max(dt[:-1] / dt[1:])) if len(dt) > 1 else 1.0
    return GridDiagnostics(C_pi=c_pi, R_pi=r_pi)
