"""Multilevel regression scheme for zero-driver BSDEs.

Level ``k`` regresses on one cloud of paths coupled with level ``k-1``; the
level-``k-1`` z-fits, integrated against the coarse Brownian increments, are
subtracted from the terminal value as a martingale control variate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .bases import BasisFactory
from .forward import SimulationCloud, map_blocks, resolve_mode, simulate_block
from .problems import BsdeProblem
from .regression import (
    ConstantFunction,
    FittedFunction,
    gram_blocks,
    rhs_blocks,
    solve_blocks,
    truncate,
    _check_finite,
)
from .timegrid import GridFamily, TimeGrid, alpha_array

# cloud id suffix for the uncontrolled (plain regression) variant, so it never shares a cloud with level k
PLAIN_TAG = 1


class MemoryBudgetError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LevelSolution:
    """Fitted ``y_i``, ``z_i`` for ``i = 0..2^k-1``; ``y_{2^k}`` is the terminal function itself."""

    level: int
    grid: TimeGrid
    y: tuple
    z: tuple
    terminal: Callable
    bound_y: float = math.inf
    bound_z: tuple = ()
    provenance: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def y_at(self, i: int, x: np.ndarray) -> np.ndarray:
        if i == self.grid.n_steps:
            return np.asarray(self.terminal(x), dtype=float).reshape(len(x))
        return self.y[i](x)[:, 0]

    def z_at(self, i: int, x: np.ndarray) -> np.ndarray:
        if i >= self.grid.n_steps:
            raise IndexError(f"z is defined for i < {self.grid.n_steps}")
        return self.z[i](x)


def _validate_bases(grid, bases_y, bases_z):
    for i in range(grid.n_steps):
        by, bz = bases_y(grid, i), bases_z(grid, i)
        if by.dimension < 1 or bz.dimension < 1:
            raise ValueError(f"empty basis at time index {i}")


# -- level 0 -----------------------------------------------------------------------


def init_level0(problem: BsdeProblem, family: GridFamily, n_paths: int, seed: int, mode=None, threads: int = 1) -> LevelSolution:
    """Sample means of ``Phi(X_T)`` and ``Phi(X_T) W_T / T`` on a one-step cloud."""
    if n_paths < 1:
        raise ValueError("level 0 needs at least one path")
    grid = family.grid(0)
    mode = resolve_mode(problem.model, mode)
    q = problem.brownian_dim

    def stats(item):
        b, start, stop = item
        c = simulate_block(problem.model, grid, False, seed, b, stop - start, mode, rng.DOMAIN_MULTILEVEL, (0,), start)
        phi = problem.phi(c.x[-1])
        _check_finite("response", phi[:, None])
        return phi.sum(), (phi[:, None] * c.dw[0]).sum(axis=0)

    sy, sz = 0.0, np.zeros(q)
    for a, b in map_blocks(stats, rng.block_slices(n_paths), threads):
        sy, sz = sy + a, sz + b
    y0 = np.array([sy / n_paths])
    z0 = sz / n_paths / grid.increments[0]
    bz = problem.bound_z(grid, 0)
    return LevelSolution(
        0,
        grid,
        (ConstantFunction(y0, problem.bound_y()),),
        (ConstantFunction(z0, bz),),
        problem.phi,
        problem.bound_y(),
        (bz,),
        {"level": 0, "n_paths": n_paths, "seed": seed, "mode": mode, "basis": "constant"},
    )


def level0_from_cloud(problem: BsdeProblem, cloud: SimulationCloud) -> LevelSolution:
    """Same as :func:`init_level0` on a cloud already in memory."""
    grid = GridFamily(problem.horizon).grid(0)
    phi = problem.phi(cloud.x[-1])
    y0 = np.array([phi.mean()])
    z0 = (phi[:, None] * cloud.dw[0]).mean(axis=0) / grid.increments[0]
    bz = problem.bound_z(grid, 0)
    return LevelSolution(0, grid, (ConstantFunction(y0, problem.bound_y()),), (ConstantFunction(z0, bz),), problem.phi, problem.bound_y(), (bz,))


# -- responses ------------------------------------------------------------------------------


def control_sums(prev: LevelSolution, cloud: SimulationCloud) -> np.ndarray:
    """``C[a] = sum_{j=a}^{2^(k-1)-1} z^{k-1}_j(Xc_j) . dWc_j`` per path; ``C[2^(k-1)] = 0``.

    Accumulated backwards once per path, so all time points share the work.
    """
    nc = prev.grid.n_steps
    out = np.zeros((nc + 1, cloud.n_paths))
    acc = np.zeros(cloud.n_paths)
    for j in range(nc - 1, 0, -1):
        acc = acc + np.einsum("nq,nq->n", prev.z_at(j, cloud.xc[j]), cloud.dwc[j])
        out[j] = acc
    return out


def level_responses(problem: BsdeProblem, grid: TimeGrid, cloud: SimulationCloud, prev: LevelSolution | None) -> np.ndarray:
    """Y-responses ``O_{Y,i}`` for ``i = 0..2^k-1``, shape ``(2^k, M)``.

    The control sum starts at coarse index ``alpha(i) + 1``: the coarse interval
    straddling ``t_i`` is left out. Without ``prev`` every response is ``Phi(X_T)``.
    """
    phi = problem.phi(cloud.x[-1])
    n = grid.n_steps
    if prev is None:
        return np.broadcast_to(phi, (n, len(phi)))
    ctrl = control_sums(prev, cloud)
    a = alpha_array(grid)[:n] + 1
    return phi[None, :] - ctrl[a]


# -- one level ------------------------------------------------------------------------------


def _accumulate(total, part):
    if total is None:
        return [None if p is None else p.copy() for p in part]
    for t, p in zip(total, part):
        if p is not None:
            t += p
    return total


def _weighted_gram(cells, local, n_cells, dw):
    """``sum phi phi^T w_c`` per cell, shape ``(n_cells, p, p, q)``."""
    return np.stack([gram_blocks(cells, local, n_cells, dw[:, c]) for c in range(dw.shape[1])], axis=-1)


def estimate_level_bytes(problem: BsdeProblem, grid: TimeGrid, n_paths: int, bases_y, bases_z, threads: int = 1) -> int:
    """Rough peak memory of :func:`build_level`: live path blocks plus the per-time normal equations."""
    d, q, n = problem.dim, problem.brownian_dim, grid.n_steps
    m = min(n_paths, rng.BLOCK_SIZE)
    per_path = (n + 1) * d * 1.5 + 3 * n * q + 3 * n + 8 * max(d, 1)
    blocks = threads * m * per_path * 8
    stats = 0
    for i in range(n):
        by, bz = bases_y(grid, i), bases_z(grid, i)
        stats += by.n_cells * by.local_dim**2 * (1 + q) + bz.n_cells * bz.local_dim * (bz.local_dim + q)
    return int(blocks + 8 * stats * (threads + 1))


def build_level(
    problem: BsdeProblem,
    grid: TimeGrid,
    prev: LevelSolution | None,
    n_paths: int,
    seed: int,
    bases_y: BasisFactory,
    bases_z: BasisFactory,
    mode: str | None = None,
    threads: int = 1,
    ids: tuple[int, ...] | None = None,
    single_pass: bool | None = None,
    center_z: bool = True,
) -> LevelSolution:
    """Regress ``y_i`` then ``z_i`` for ``i = 2^k-1..0`` on one cloud of ``n_paths`` paths.

    ``prev=None`` drops the control variate (plain regression of ``Phi(X_T)``).
    ``center_z=False`` regresses ``O_{Y,i} dW_i / dt_i`` without subtracting the
    fitted ``y_i`` (the multistep response for a zero driver).
    When Y and Z share a basis at ``t_i`` and y is untruncated, the Z normal
    equations follow from sums gathered in the same pass as the Y ones;
    otherwise the cloud is regenerated block by block for a second pass.
    """
    k = grid.level
    if k < 1:
        raise ValueError("build_level needs k >= 1; use init_level0 for k = 0")
    if prev is not None and (prev.level != k - 1 or prev.grid.family != grid.family):
        raise ValueError(f"previous solution must be level {k - 1} of the same grid family")
    if n_paths < 1:
        raise ValueError("a level needs at least one path")
    mode = resolve_mode(problem.model, mode)
    ids = (k,) if ids is None else ids
    n = grid.n_steps
    q = problem.brownian_dim
    dt = grid.increments
    _validate_bases(grid, bases_y, bases_z)
    by = [bases_y(grid, i) for i in range(n)]
    bz = [bases_z(grid, i) for i in range(n)]
    shared = [by[i] is bz[i] for i in range(n)]
    bound_y = problem.bound_y()
    bound_z = tuple(problem.bound_z(grid, i) for i in range(n))
    can_share = all(shared) and (math.isinf(bound_y) or not center_z)
    if single_pass is None:
        single_pass = can_share
    elif single_pass and not can_share:
        raise ValueError("single-pass Z needs a shared untruncated basis at every time point")
    coupled = prev is not None
    slices = rng.block_slices(n_paths)

    def block(item):
        b, start, stop = item
        return simulate_block(problem.model, grid, coupled, seed, b, stop - start, mode, rng.DOMAIN_MULTILEVEL, ids, start)

    def first_pass(item):
        c = block(item)
        o = level_responses(problem, grid, c, prev)
        part = []
        for i in range(n):
            _check_response(o[i], i)
            cells, local = by[i].design(c.x[i])
            part.append(gram_blocks(cells, local, by[i].n_cells))
            part.append(rhs_blocks(cells, local, o[i][:, None], by[i].n_cells))
            if single_pass:
                part.append(_weighted_gram(cells, local, by[i].n_cells, c.dw[i]) if center_z else None)
                part.append(rhs_blocks(cells, local, o[i][:, None] * c.dw[i], by[i].n_cells))
        return part

    totals = _reduce(first_pass, slices, threads)
    stride = 4 if single_pass else 2
    coef_y = [solve_blocks(totals[stride * i], totals[stride * i + 1]) for i in range(n)]
    fy = tuple(FittedFunction(by[i], coef_y[i], bound_y) for i in range(n))

    if single_pass:
        coef_z = []
        for i in range(n):
            gw, rw = totals[4 * i + 2], totals[4 * i + 3]
            # sum phi w_c (O - phi^T beta) / dt = (rw_c - gw_c beta) / dt
            if center_z:
                rz = (rw - np.einsum("kpsc,ks->kpc", gw, coef_y[i][:, :, 0])) / dt[i]
            else:
                rz = rw / dt[i]
            coef_z.append(solve_blocks(totals[4 * i], rz))
    else:

        def second_pass(item):
            c = block(item)
            o = level_responses(problem, grid, c, prev)
            part = []
            for i in range(n):
                design = bz[i].design(c.x[i])
                if center_z:
                    yv = fy[i](c.x[i], by[i].design(c.x[i]) if not shared[i] else design)[:, 0]
                    rz = c.dw[i] / dt[i] * (o[i] - yv)[:, None]
                else:
                    rz = c.dw[i] / dt[i] * o[i][:, None]
                part.append(gram_blocks(*design, bz[i].n_cells))
                part.append(rhs_blocks(*design, rz, bz[i].n_cells))
            return part

        totals_z = _reduce(second_pass, slices, threads)
        coef_z = [solve_blocks(totals_z[2 * i], totals_z[2 * i + 1]) for i in range(n)]
    fz = tuple(FittedFunction(bz[i], coef_z[i], bound_z[i]) for i in range(n))
    prov = {
        "level": k,
        "n_paths": n_paths,
        "seed": seed,
        "cloud_ids": list(ids),
        "mode": mode,
        "controlled": coupled,
        "single_pass": single_pass,
        "center_z": center_z,
        "basis_y": bases_y.describe(),
        "basis_z": bases_z.describe(),
    }
    return LevelSolution(k, grid, fy, fz, problem.phi, bound_y, bound_z, prov)


def _check_response(o, i):
    bad = ~np.isfinite(o)
    if bad.any():
        raise ValueError(f"non-finite response at time index {i}, sample index {int(np.argmax(bad))}")


def _reduce(fn, slices, threads):
    """Sum per-block lists of arrays in block order; chunks of ``threads`` blocks run concurrently."""
    total = None
    step = max(1, threads)
    for c in range(0, len(slices), step):
        for part in map_blocks(fn, slices[c : c + step], threads):
            total = _accumulate(total, part)
    return total


# -- the full recursion -------------------------------------------------------------------


def check_memory(estimate: int, budget: int | None, what: str) -> None:
    if budget is not None and estimate > budget:
        raise MemoryBudgetError(f"{what} needs about {estimate} bytes, above the budget of {budget}")


def solve_multilevel(
    problem: BsdeProblem,
    family: GridFamily,
    k_final: int,
    schedule: Sequence[int],
    seed: int,
    bases_y: BasisFactory,
    bases_z: BasisFactory | None = None,
    mode: str | None = None,
    threads: int = 1,
    mem_budget: int | None = None,
    timings: dict | None = None,
) -> list[LevelSolution]:
    """Levels ``0..k_final``, each on its own cloud of ``schedule[j]`` paths."""
    if problem.driver is not None:
        raise ValueError("the multilevel scheme handles the zero-driver part only")
    if len(schedule) < k_final + 1:
        raise ValueError(f"schedule covers {len(schedule)} levels, need {k_final + 1}")
    bases_z = bases_y if bases_z is None else bases_z
    for j in range(1, k_final + 1):
        g = family.grid(j)
        check_memory(estimate_level_bytes(problem, g, schedule[j], bases_y, bases_z, threads), mem_budget, f"level {j}")
    t0 = time.perf_counter()
    levels = [init_level0(problem, family, int(schedule[0]), seed, mode, threads)]
    if timings is not None:
        timings[0] = time.perf_counter() - t0
    for j in range(1, k_final + 1):
        t0 = time.perf_counter()
        levels.append(build_level(problem, family.grid(j), levels[-1], int(schedule[j]), seed, bases_y, bases_z, mode, threads))
        if timings is not None:
            timings[j] = time.perf_counter() - t0
    return levels


def solve_plain(
    problem: BsdeProblem,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    bases_y: BasisFactory,
    bases_z: BasisFactory | None = None,
    mode: str | None = None,
    threads: int = 1,
    mem_budget: int | None = None,
    center_z: bool = False,
) -> LevelSolution:
    """The same regressions on a single level-k cloud with the control variate removed.

    For a zero driver this is the multistep regression scheme on one shared cloud.
    """
    if problem.driver is not None:
        raise ValueError("solve_plain handles zero drivers only; use solve_lsmdp_full")
    bases_z = bases_y if bases_z is None else bases_z
    if grid.level == 0:
        return init_level0(problem, grid.family, n_paths, seed, mode, threads)
    check_memory(estimate_level_bytes(problem, grid, n_paths, bases_y, bases_z, threads), mem_budget, f"level {grid.level}")
    return build_level(
        problem, grid, None, n_paths, seed, bases_y, bases_z, mode, threads, ids=(grid.level, PLAIN_TAG), center_z=center_z
    )
