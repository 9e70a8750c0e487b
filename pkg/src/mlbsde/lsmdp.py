"""Multistep regression with one fresh cloud per time point.

Used for the residual of the splitting (zero terminal value, proxy driver built
from a multilevel solution) and, with the raw terminal function and driver,
as the unsplit baseline.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bases import BasisFactory
from .forward import iter_timepoint_blocks, resolve_mode
from .multilevel import LevelSolution, check_memory
from .problems import BsdeProblem
from .regression import ConstantFunction, FittedFunction, NormalEquations, _check_finite
from .timegrid import TimeGrid, grid_diagnostics

RESIDUAL_TAG = 0
FULL_TAG = 1


class DesignCache:
    """Design matrices of one state array, keyed by basis identity."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self._d: dict = {}

    def design(self, basis):
        key = id(basis)
        if key not in self._d:
            self._d[key] = (basis, basis.design(self.x))
        return self._d[key][1]


def evaluate(fn, x: np.ndarray, cache: DesignCache | None = None) -> np.ndarray:
    if cache is not None and isinstance(fn, FittedFunction):
        return fn(x, cache.design(fn.basis))
    return fn(x)


def _level_y(ml: LevelSolution, j: int, x, cache=None) -> np.ndarray:
    if j == ml.grid.n_steps:
        return ml.y_at(j, x)
    return evaluate(ml.y[j], x, cache)[:, 0]


def _level_z(ml: LevelSolution, j: int, x, cache=None) -> np.ndarray:
    return evaluate(ml.z[j], x, cache)


@dataclass(frozen=True, eq=False)
class ResidualSolution:
    """Fitted functions at ``i = 0..2^k-1``; the value at ``i = 2^k`` is ``terminal`` (zero for the residual)."""

    grid: TimeGrid
    y: tuple
    z: tuple
    terminal: Callable | None = None
    bounds_y: tuple = ()
    bounds_z: tuple = ()
    provenance: dict = field(default_factory=dict)

    @property
    def level(self) -> int:
        return self.grid.level

    def y_at(self, i: int, x: np.ndarray, cache=None) -> np.ndarray:
        if i == self.grid.n_steps:
            if self.terminal is None:
                return np.zeros(len(x))
            return np.asarray(self.terminal(x), dtype=float).reshape(len(x))
        return evaluate(self.y[i], x, cache)[:, 0]

    def z_at(self, i: int, x: np.ndarray, cache=None) -> np.ndarray:
        return evaluate(self.z[i], x, cache)


def proxy_driver(problem: BsdeProblem, ml: LevelSolution) -> Callable | None:
    """``g_j(x_j, x_{j+1}, y, z) = f_j(x_j, y^ML_{j+1}(x_{j+1}) + y, z^ML_j(x_j) + z)``; ``None`` for a zero driver."""
    f = problem.driver
    if f is None:
        return None
    pts = ml.grid.points

    def g(j, xj, xj1, y, z, cache_j=None, cache_j1=None):
        return f(j, pts[j], xj, _level_y(ml, j + 1, xj1, cache_j1) + y, _level_z(ml, j, xj, cache_j) + z)

    return g


def _raw_driver(problem: BsdeProblem, grid: TimeGrid) -> Callable | None:
    f = problem.driver
    if f is None:
        return None
    pts = grid.points

    def g(j, xj, xj1, y, z, cache_j=None, cache_j1=None):
        return f(j, pts[j], xj, y, z)

    return g


@dataclass(frozen=True)
class SmallnessReport:
    lhs: float
    threshold: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.threshold


def smallness_check(problem: BsdeProblem, grid: TimeGrid) -> SmallnessReport | None:
    """Sufficient step-size condition ``C_pi L_f^2 (R_pi v 1) <= 1 / (384 (2q + (1+T) e^{T/2}) (1+T))``.

    Returns ``None`` when the driver's Lipschitz constant is unknown.
    """
    if problem.lipschitz is None or grid.level < 1:
        return None
    diag = grid_diagnostics(grid.family, grid.level, problem.theta_L)
    T, q = problem.horizon, problem.brownian_dim
    lhs = diag.C_pi * problem.lipschitz**2 * max(diag.R_pi, 1.0)
    thr = 1.0 / (384 * (2 * q + (1 + T) * math.exp(T / 2)) * (1 + T))
    return SmallnessReport(lhs, thr)


def estimate_lsmdp_bytes(problem: BsdeProblem, grid: TimeGrid, counts: Sequence[int]) -> int:
    d, q, n = problem.dim, problem.brownian_dim, grid.n_steps
    m = max(counts)
    from .rng import BLOCK_SIZE

    blk = min(m, BLOCK_SIZE) * ((n + 1) * (d + q) * 2) * 8
    stored = m * (2 * d + 2 + q) * 8
    return int(blk + stored)


def _solve_multistep(
    problem: BsdeProblem,
    grid: TimeGrid,
    counts: Sequence[int],
    seed: int,
    driver: Callable | None,
    terminal: Callable | None,
    bases_y: BasisFactory,
    bases_z: BasisFactory,
    bounds_y: Sequence[float],
    bounds_z: Sequence[float],
    mode: str | None,
    tag: int,
) -> ResidualSolution:
    n = grid.n_steps
    if len(counts) != n:
        raise ValueError(f"need one cloud size per time index 0..{n - 1}, got {len(counts)}")
    if any(int(c) < 1 for c in counts):
        raise ValueError("every time point needs a non-empty cloud")
    mode = resolve_mode(problem.model, mode)
    q = problem.brownian_dim
    dt = grid.increments
    pts = grid.points
    ys: list = [None] * n
    zs: list = [None] * n
    sol = ResidualSolution(grid, (), (), terminal)

    def y_next(j1, x, cache):
        if j1 == n:
            return np.zeros(len(x)) if terminal is None else np.asarray(terminal(x), dtype=float).reshape(len(x))
        return evaluate(ys[j1], x, cache)[:, 0]

    for i in range(n - 1, -1, -1):
        by, bz = bases_y(grid, i), bases_z(grid, i)
        ne_z = NormalEquations(bz, q)
        kept = []
        for blk in iter_timepoint_blocks(problem.model, grid, i, int(counts[i]), seed, mode, (grid.level, i, tag)):
            x = blk.x
            caches = [DesignCache(x[r]) for r in range(n - i + 1)]
            if terminal is None:
                acc = np.zeros(blk.n_paths)
            else:
                acc = np.asarray(terminal(x[-1]), dtype=float).reshape(blk.n_paths)
            if driver is not None:
                for j in range(n - 1, i, -1):
                    r = j - i
                    yv = y_next(j + 1, x[r + 1], caches[r + 1])
                    zv = evaluate(zs[j], x[r], caches[r])
                    acc = acc + driver(j, x[r], x[r + 1], yv, zv, caches[r], caches[r + 1]) * dt[j]
            _check_finite("response", acc[:, None])
            ne_z.add(x[0], acc[:, None] * blk.dw / dt[i], caches[0].design(bz))
            kept.append((x[0], x[1], acc, caches[0], caches[1]))
        zs[i] = FittedFunction(bz, ne_z.solve(), bounds_z[i])
        ne_y = NormalEquations(by, 1)
        for x0, x1, acc, c0, c1 in kept:
            resp = acc
            if driver is not None:
                resp = acc + driver(i, x0, x1, y_next(i + 1, x1, c1), evaluate(zs[i], x0, c0), c0, c1) * dt[i]
            ne_y.add(x0, resp[:, None], c0.design(by))
        ys[i] = FittedFunction(by, ne_y.solve(), bounds_y[i])
    return ResidualSolution(
        grid,
        tuple(ys),
        tuple(zs),
        terminal,
        tuple(bounds_y),
        tuple(bounds_z),
        {
            "level": grid.level,
            "counts": [int(c) for c in counts],
            "seed": seed,
            "mode": mode,
            "basis_y": bases_y.describe(),
            "basis_z": bases_z.describe(),
        },
    )


def _zero_solution(problem: BsdeProblem, grid: TimeGrid, bounds_y, bounds_z, note: str) -> ResidualSolution:
    q = problem.brownian_dim
    ys = tuple(ConstantFunction(np.zeros(1), bounds_y[i]) for i in range(grid.n_steps))
    zs = tuple(ConstantFunction(np.zeros(q), bounds_z[i]) for i in range(grid.n_steps))
    return ResidualSolution(grid, ys, zs, None, tuple(bounds_y), tuple(bounds_z), {"level": grid.level, "note": note})


def solve_residual(
    problem: BsdeProblem,
    ml: LevelSolution,
    counts: Sequence[int],
    seed: int,
    bases_y: BasisFactory,
    bases_z: BasisFactory | None = None,
    mode: str | None = None,
    mem_budget: int | None = None,
    skip_zero_driver: bool = True,
) -> ResidualSolution:
    """Residual ``(ybar, zbar)`` with zero terminal value and the proxy driver of ``ml``."""
    grid = ml.grid
    bases_z = bases_y if bases_z is None else bases_z
    n = grid.n_steps
    by = [problem.residual_bound_y(grid, i) for i in range(n)]
    bz = [problem.residual_bound_z(grid, i) for i in range(n)]
    driver = proxy_driver(problem, ml)
    if driver is None and skip_zero_driver:
        return _zero_solution(problem, grid, by, bz, "zero driver")
    report = smallness_check(problem, grid)
    if report is not None and not report.satisfied:
        warnings.warn(
            f"step-size condition not met at level {grid.level}: C_pi L_f^2 = {report.lhs:.3g} > {report.threshold:.3g}",
            stacklevel=2,
        )
    check_memory(estimate_lsmdp_bytes(problem, grid, counts), mem_budget, f"residual at level {grid.level}")
    if driver is None:
        driver = lambda j, xj, xj1, y, z, cj=None, cj1=None: np.zeros(len(xj))
    out = _solve_multistep(problem, grid, counts, seed, driver, None, bases_y, bases_z, by, bz, mode, RESIDUAL_TAG)
    if report is not None:
        out.provenance["smallness"] = {"lhs": report.lhs, "threshold": report.threshold}
    return out


def solve_lsmdp_full(
    problem: BsdeProblem,
    grid: TimeGrid,
    counts: Sequence[int],
    seed: int,
    bases_y: BasisFactory,
    bases_z: BasisFactory | None = None,
    mode: str | None = None,
    mem_budget: int | None = None,
) -> ResidualSolution:
    """Unsplit scheme: terminal ``Phi``, raw driver, one cloud per time point."""
    bases_z = bases_y if bases_z is None else bases_z
    n = grid.n_steps
    by = [problem.bound_y() for _ in range(n)]
    bz = [problem.bound_z(grid, i) for i in range(n)]
    check_memory(estimate_lsmdp_bytes(problem, grid, counts), mem_budget, f"LSMDP at level {grid.level}")
    return _solve_multistep(problem, grid, counts, seed, _raw_driver(problem, grid), problem.phi, bases_y, bases_z, by, bz, mode, FULL_TAG)


@dataclass(frozen=True, eq=False)
class SplitSolution:
    """``(y^ML + ybar, z^ML + zbar)``."""

    ml: LevelSolution
    residual: ResidualSolution

    def __post_init__(self):
        a, b = self.ml.grid, self.residual.grid
        if a.level != b.level or a.family != b.family:
            raise ValueError("multilevel and residual parts live on different grids")

    @property
    def grid(self) -> TimeGrid:
        return self.ml.grid

    def y_at(self, i, x):
        return self.ml.y_at(i, x) + self.residual.y_at(i, x)

    def z_at(self, i, x):
        return self.ml.z_at(i, x) + self.residual.z_at(i, x)


def assemble_split(ml: LevelSolution, residual: ResidualSolution) -> SplitSolution:
    return SplitSolution(ml, residual)
