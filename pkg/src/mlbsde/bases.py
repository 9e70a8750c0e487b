"""Per-time-point basis choices.

A factory maps ``(grid, i)`` to the basis used for the regression at ``t_i``.
Factories cache their output, so asking twice returns the same object; the
solvers use that identity to share design matrices between Y and Z fits.
"""

from __future__ import annotations

import math

import numpy as np

from . import rng
from .forward import ForwardModel, sample_marginal
from .regression import (
    Basis,
    HermiteBasis,
    HypercubePartition,
    LocalAffine,
    equiprobable_partition,
)
from .timegrid import TimeGrid

DEFAULT_PROBE = 1 << 17


class BasisFactory:
    def __init__(self):
        self._cache: dict = {}

    def __call__(self, grid: TimeGrid, i: int) -> Basis:
        key = self._key(grid, i)
        if key not in self._cache:
            self._cache[key] = self._build(grid, i)
        return self._cache[key]

    def _key(self, grid, i):
        return (grid.family, grid.level, i)

    def _build(self, grid: TimeGrid, i: int) -> Basis:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class FixedBasis(BasisFactory):
    """The same basis at every time point."""

    def __init__(self, basis: Basis, label: str = "fixed"):
        super().__init__()
        self.basis = basis
        self.label = label

    def __call__(self, grid, i):
        return self.basis

    def describe(self):
        return {"kind": self.label, "dimension": self.basis.dimension}


class HermiteFactory(BasisFactory):
    """Hermite polynomials orthonormal under the marginal ``N(x0, vol^2 t_i)`` of a scaled Brownian motion."""

    def __init__(self, degree: int = 7, x0: float = 0.0, vol: float = 1.0):
        super().__init__()
        self.degree, self.x0, self.vol = degree, x0, vol

    def _key(self, grid, i):
        return float(grid.points[i])

    def _build(self, grid, i):
        return HermiteBasis(self.degree, self.vol * math.sqrt(grid.points[i]), self.x0)

    def describe(self):
        return {"kind": "hermite", "degree": self.degree, "dimension": self.degree + 1}


class EquiprobableFactory(BasisFactory):
    """Hypercubes with equal marginal mass per axis, estimated from a probe sample of ``X_{t_i}``.

    At ``t = 0`` the state is deterministic and the basis is the constant.
    ``affine=True`` fits an affine function inside each cell.
    """

    def __init__(self, model: ForwardModel, cells_per_axis: int, affine: bool = False, probe_size: int = DEFAULT_PROBE, seed: int = 0):
        super().__init__()
        self.model = model
        self.cells_per_axis = cells_per_axis
        self.affine = affine
        self.probe_size = probe_size
        self.seed = seed
        self.min_cell_mass: dict[float, float] = {}

    def _key(self, grid, i):
        # exact marginals depend on the time only, so grids of different levels share partitions
        if self.model.has_exact_transition:
            return float(grid.points[i])
        return (grid.family, grid.level, i)

    def _build(self, grid, i):
        if grid.points[i] == 0.0:
            return HypercubePartition.whole_space(self.model.dim)
        # the probe id is the bit pattern of t_i, so equal times share a probe across levels
        t_bits = int(np.float64(grid.points[i]).view(np.uint64))
        ids = (t_bits,) if self.model.has_exact_transition else (grid.level, i)
        probe = sample_marginal(self.model, grid, i, self.probe_size, self.seed, rng.DOMAIN_PROBE, ids)
        part = equiprobable_partition(probe, self.cells_per_axis)
        self.min_cell_mass[float(grid.points[i])] = part.min_cell_mass
        return LocalAffine(part) if self.affine else part

    def describe(self):
        n_cells = self.cells_per_axis**self.model.dim
        return {
            "kind": "equiprobable-affine" if self.affine else "equiprobable-indicator",
            "cells_per_axis": self.cells_per_axis,
            "dimension": n_cells * ((1 + self.model.dim) if self.affine else 1),
            "probe_size": self.probe_size,
            "probe_seed": self.seed,
        }


class UniformBoxFactory(BasisFactory):
    """Equal-size hypercubes on ``[low, high]^d``; points outside get zero features."""

    def __init__(self, low: float, high: float, cells_per_axis: int, dim: int, affine: bool = False):
        super().__init__()
        self.part = HypercubePartition.uniform(low, high, cells_per_axis, dim)
        self.basis = LocalAffine(self.part) if affine else self.part
        self.affine = affine

    def __call__(self, grid, i):
        return self.basis

    def describe(self):
        e = self.part.edges[0]
        return {
            "kind": "uniform-affine" if self.affine else "uniform-indicator",
            "low": float(e[0]),
            "high": float(e[-1]),
            "cells_per_axis": len(e) - 1,
            "dimension": self.basis.dimension,
        }
