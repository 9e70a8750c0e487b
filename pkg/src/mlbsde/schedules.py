"""Simulation budgets per level: fixed published schedules and the precision-driven calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .timegrid import GridFamily


def ml_doubling(k: int, final: int) -> list[int]:
    """``M_k = final`` at the top level, doubling at each level downward."""
    return [final * 2 ** (k - j) for j in range(k + 1)]


def sine_ml_schedule(k: int, dim: int = 8, factor: int = 40) -> list[int]:
    return ml_doubling(k, factor * dim * 2**k)


def sine_mdp1_size(k: int, dim: int = 8, factor: int = 40) -> int:
    return factor * dim * 2**k


def sine_mdp2_size(k: int, dim: int = 8, factor: int = 40) -> int:
    return factor * dim * 4**k


def constant_schedule(k: int, m: int) -> list[int]:
    return [int(m)] * (k + 1)


def cost(schedule) -> int:
    """Path-steps simulated by a multilevel schedule: ``sum_j 2^j M_j``."""
    return int(sum(2**j * int(m) for j, m in enumerate(schedule)))


@dataclass
class CalibratedSchedule:
    epsilon: float
    dim: int
    k_final: int
    cells: list  # per level j: basis size K(j, i) per time point i
    cells_per_axis: list
    sizes: list  # M_j
    predicted_ml: float
    predicted_mdp: float
    mdp_size: int
    constants: dict = field(default_factory=dict)

    @property
    def bookkeeping_cost(self) -> int:
        return cost(self.sizes)

    @property
    def mdp_cost(self) -> int:
        return self.mdp_size * 2**self.k_final

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "dim": self.dim,
            "k_final": self.k_final,
            "M": self.sizes,
            "K": self.cells,
            "cells_per_axis": self.cells_per_axis,
            "cost_ml": self.bookkeeping_cost,
            "cost_mdp": self.mdp_cost,
            "predicted_ml": self.predicted_ml,
            "predicted_mdp": self.predicted_mdp,
            "constants": self.constants,
        }


def basis_size(epsilon: float, dim: int, remaining: float, c_K: float = 1.0) -> int:
    """``K = c_K (T - t)^{-d/2} eps^{-d/2}``, rounded up: hypercubes of diameter ``sqrt((T - t) eps)``."""
    return int(math.ceil(c_K * remaining ** (-dim / 2) * epsilon ** (-dim / 2) - 1e-9))


def calibrate_schedule(
    epsilon: float,
    dim: int,
    k_final: int,
    family: GridFamily = GridFamily(),
    theta: float = 1.0,
    c_K: float = 1.0,
    c_M: float = 1.0,
) -> CalibratedSchedule:
    """Basis sizes and path counts targeting precision ``epsilon``.

    Top level: ``M_k = c_M k 2^{kd/2} eps^{-1-d/2}``; lower levels
    ``M_j = c_M j 2^{j + jd/2} eps^{-d/2}``. ``theta`` only enters the
    constants of the error bounds and is recorded for reference.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    d = dim
    cells, per_axis, sizes = [], [], []
    for j in range(k_final + 1):
        g = family.grid(j)
        rem = family.horizon - g.points[:-1]
        kj = [basis_size(epsilon, d, r, c_K) for r in rem]
        cells.append(kj)
        per_axis.append([int(math.ceil(kk ** (1.0 / d) - 1e-9)) for kk in kj])
        if j == k_final:
            m = c_M * max(j, 1) * 2 ** (j * d / 2) * epsilon ** (-1 - d / 2)
        else:
            m = c_M * max(j, 1) * 2 ** (j + j * d / 2) * epsilon ** (-d / 2)
        sizes.append(int(math.ceil(m)))
    pred_ml = math.log(1 / epsilon + 1) * epsilon ** (-2 - d)
    pred_mdp = epsilon ** (-3 - d)
    # the unsplit scheme at the same precision: M = eps^{-1} 2^k K at the last time point
    mdp_size = int(math.ceil(2**k_final * cells[-1][-1] / epsilon))
    return CalibratedSchedule(
        epsilon, d, k_final, cells, per_axis, sizes, pred_ml, pred_mdp, mdp_size, {"c_K": c_K, "c_M": c_M, "theta": theta}
    )


def format_table(s: CalibratedSchedule) -> str:
    lines = [f"epsilon={s.epsilon:g} d={s.dim} k={s.k_final}", f"{'j':>3} {'M_j':>14} {'K(t=0)':>8} {'K(last)':>8} {'2^j M_j':>16}"]
    for j, (m, kk) in enumerate(zip(s.sizes, s.cells)):
        lines.append(f"{j:>3} {m:>14d} {kk[0]:>8d} {kk[-1]:>8d} {2**j * m:>16d}")
    lines.append(f"cost ML (sum 2^j M_j) = {s.bookkeeping_cost}, cost MDP (2^k M) = {s.mdp_cost}")
    lines.append(
        f"predicted order: ML ln(1/eps+1) eps^(-2-d) = {s.predicted_ml:.4g}, MDP eps^(-3-d) = {s.predicted_mdp:.4g}, "
        f"ratio = {s.predicted_ml / s.predicted_mdp:.4g}"
    )
    return "\n".join(lines)
