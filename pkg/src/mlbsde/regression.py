"""Least squares on empirical measures.

A basis is described by a *block design*: each point falls into at most one
cell and carries ``local_dim`` features there. Indicator partitions have
``local_dim = 1``, local affine partitions ``1 + d``, and global bases
(Hermite, a constant) a single cell. The Gram matrix is then block diagonal
and is accumulated cell by cell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def truncate(v, bound: float):
    """Componentwise clamp to ``[-bound, bound]``; identity for an infinite bound."""
    if bound is None or math.isinf(bound):
        return v
    if not bound > 0:
        raise ValueError(f"truncation bound must be positive, got {bound}")
    return np.clip(v, -bound, bound)


def _check_finite(name: str, a: np.ndarray) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise ValueError(f"non-finite {name} at sample index {row}")


class Basis:
    n_cells: int
    local_dim: int

    @property
    def dimension(self) -> int:
        return self.n_cells * self.local_dim

    def design(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell index per point (-1 when all features vanish) and local features ``(n, local_dim)``."""
        raise NotImplementedError

    def features(self, x: np.ndarray) -> np.ndarray:
        """Dense feature matrix ``(n, dimension)``."""
        cells, local = self.design(x)
        n = len(cells)
        out = np.zeros((n, self.n_cells, self.local_dim))
        inside = cells >= 0
        out[np.flatnonzero(inside), cells[inside]] = local[inside]
        return out.reshape(n, self.dimension)


def _cell_anchor(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = edges[:-1], edges[1:]
    both = np.isfinite(lo) & np.isfinite(hi)
    anchor = np.where(both, 0.5 * (lo + hi), np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0)))
    scale = np.where(both, 0.5 * (hi - lo), 1.0)
    scale = np.where(scale > 0, scale, 1.0)
    return anchor, scale


@dataclass(frozen=True, eq=False)
class HypercubePartition(Basis):
    """Product of per-axis intervals ``[e_j, e_{j+1})``; outer edges may be infinite.

    Points outside the box get the zero feature vector. The top edge of a
    finite box is included in the last cell.
    """

    edges: tuple[np.ndarray, ...]
    min_cell_mass: float | None = field(default=None, compare=False)

    local_dim = 1

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=float) for e in self.edges)
        for e in edges:
            if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("each axis needs at least two strictly increasing edges")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, low: float, high: float, cells_per_axis: int, dim: int) -> "HypercubePartition":
        e = np.linspace(low, high, cells_per_axis + 1)
        return cls(tuple(e for _ in range(dim)))

    @classmethod
    def whole_space(cls, dim: int) -> "HypercubePartition":
        return cls(tuple(np.array([-np.inf, np.inf]) for _ in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.edges)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def axis_index(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Flat cell index (-1 outside the box) and the clipped per-axis interval indices."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        flat = np.zeros(len(x), dtype=np.intp)
        inside = np.ones(len(x), dtype=bool)
        per_axis = []
        for a, e in enumerate(self.edges):
            n_a = len(e) - 1
            if n_a == 1 and np.isinf(e[0]) and np.isinf(e[1]):
                per_axis.append(np.zeros(len(x), dtype=np.intp))
                continue
            idx = np.searchsorted(e, x[:, a], side="right") - 1
            idx = np.where(x[:, a] == e[-1], n_a - 1, idx)
            inside &= (idx >= 0) & (idx < n_a)
            idx = np.clip(idx, 0, n_a - 1)
            per_axis.append(idx)
            flat = flat * n_a + idx
        return np.where(inside, flat, -1), per_axis

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        return self.axis_index(x)[0]

    def design(self, x):
        cells = self.cell_index(x)
        return cells, np.ones((len(cells), 1))

    def cell_mass(self, x: np.ndarray) -> np.ndarray:
        cells = self.cell_index(x)
        return np.bincount(cells[cells >= 0], minlength=self.n_cells) / len(cells)


@dataclass(frozen=True, eq=False)
class LocalAffine(Basis):
    """Affine functions within each cell of a partition, vanishing outside it."""

    partition: HypercubePartition

    def __post_init__(self):
        anchors = [_cell_anchor(e) for e in self.partition.edges]
        object.__setattr__(self, "_anchors", anchors)

    @property
    def n_cells(self) -> int:
        return self.partition.n_cells

    @property
    def local_dim(self) -> int:
        return 1 + self.partition.dim

    def design(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.partition.dim)
        cells, per_axis = self.partition.axis_index(x)
        local = np.empty((len(x), self.local_dim))
        local[:, 0] = 1.0
        for a, idx in enumerate(per_axis):
            anchor, scale = self._anchors[a]
            local[:, 1 + a] = (x[:, a] - anchor[idx]) / scale[idx]
        return cells, local


@dataclass(frozen=True)
class HermiteBasis(Basis):
    """``He_j((x - center)/std) / sqrt(j!)``, j = 0..degree: orthonormal under N(center, std^2).

    With ``std == 0`` (a point mass) only the constant survives.
    """

    degree: int
    std: float
    center: float = 0.0

    n_cells = 1

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.std < 0:
            raise ValueError("std must be nonnegative")

    @property
    def local_dim(self) -> int:
        return 1 if self.std == 0 else self.degree + 1

    def design(self, x):
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        if x.shape[1] != 1:
            raise ValueError("the Hermite basis is one-dimensional")
        n = len(x)
        out = np.empty((n, self.local_dim))
        out[:, 0] = 1.0
        if self.local_dim > 1:
            z = (x[:, 0] - self.center) / self.std
            out[:, 1] = z
            # He_{j+1} = z He_j - j He_{j-1}, carried in normalised form
            for j in range(1, self.degree):
                out[:, j + 1] = (z * out[:, j] - math.sqrt(j) * out[:, j - 1]) / math.sqrt(j + 1)
        return np.zeros(n, dtype=np.intp), out


@dataclass(frozen=True, eq=False)
class DenseBasis(Basis):
    """Arbitrary global features ``fn(x) -> (n, K)``."""

    fn: object
    size: int

    n_cells = 1

    @property
    def local_dim(self) -> int:
        return self.size

    def design(self, x):
        f = np.asarray(self.fn(x), dtype=float).reshape(len(x), self.size)
        return np.zeros(len(x), dtype=np.intp), f


def equiprobable_partition(probe: np.ndarray, cells_per_axis: int) -> HypercubePartition:
    """Per-axis empirical quantile breakpoints of a probe sample; outer cells unbounded."""
    probe = np.asarray(probe, dtype=float)
    if probe.ndim == 1:
        probe = probe[:, None]
    if cells_per_axis < 1:
        raise ValueError("need at least one cell per axis")
    edges = []
    levels = np.arange(1, cells_per_axis) / cells_per_axis
    for a in range(probe.shape[1]):
        col = probe[:, a]
        if np.ptp(col) == 0:
            raise ValueError(f"degenerate marginal on axis {a}: every probe equals {col[0]}")
        inner = np.quantile(col, levels)
        inner = np.unique(inner)
        edges.append(np.concatenate([[-np.inf], inner, [np.inf]]))
    part = HypercubePartition(tuple(edges))
    mass = part.cell_mass(probe)
    return HypercubePartition(part.edges, min_cell_mass=float(mass.min()))


# -- accumulation and solves ---------------------------------------------------------


def gram_blocks(cells, local, n_cells: int, weights=None) -> np.ndarray:
    """Sum over points of ``w * phi phi^T`` per cell, shape ``(n_cells, p, p)``."""
    p = local.shape[1]
    inside = cells >= 0
    if not inside.all():
        cells, local = cells[inside], local[inside]
        weights = None if weights is None else weights[inside]
    if n_cells == 1:
        lw = local if weights is None else local * weights[:, None]
        return (lw.T @ local)[None]
    out = np.empty((n_cells, p, p))
    for a in range(p):
        for b in range(a, p):
            w = local[:, a] * local[:, b]
            if weights is not None:
                w = w * weights
            out[:, a, b] = out[:, b, a] = np.bincount(cells, weights=w, minlength=n_cells)
    return out


def rhs_blocks(cells, local, responses, n_cells: int) -> np.ndarray:
    """Sum over points of ``phi r^T`` per cell, shape ``(n_cells, p, r)``."""
    p = local.shape[1]
    r = responses.shape[1]
    inside = cells >= 0
    if not inside.all():
        cells, local, responses = cells[inside], local[inside], responses[inside]
    if n_cells == 1:
        return (local.T @ responses)[None]
    out = np.empty((n_cells, p, r))
    for a in range(p):
        for c in range(r):
            out[:, a, c] = np.bincount(cells, weights=local[:, a] * responses[:, c], minlength=n_cells)
    return out


def solve_blocks(gram: np.ndarray, rhs: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Minimum-norm solutions of the per-cell normal equations; empty cells give 0."""
    if gram.shape[1] == 1:
        g = gram[:, 0, 0]
        safe = np.where(g > 0, g, 1.0)
        return np.where((g > 0)[:, None, None], rhs / safe[:, None, None], 0.0)
    return np.linalg.pinv(gram, rcond=rcond, hermitian=True) @ rhs


class NormalEquations:
    """Streaming accumulator for ``OLS(responses, span(basis), empirical measure)``."""

    def __init__(self, basis: Basis, arity: int = 1):
        self.basis = basis
        self.arity = arity
        self.gram = np.zeros((basis.n_cells, basis.local_dim, basis.local_dim))
        self.rhs = np.zeros((basis.n_cells, basis.local_dim, arity))
        self.count = 0

    def add(self, x, responses, design=None) -> None:
        responses = np.asarray(responses, dtype=float).reshape(len(x), self.arity)
        _check_finite("response", responses)
        _check_finite("sample", np.asarray(x, dtype=float).reshape(len(x), -1))
        cells, local = self.basis.design(x) if design is None else design
        self.gram += gram_blocks(cells, local, self.basis.n_cells)
        self.rhs += rhs_blocks(cells, local, responses, self.basis.n_cells)
        self.count += len(responses)

    def solve(self) -> np.ndarray:
        return solve_blocks(self.gram, self.rhs)


@dataclass(frozen=True)
class FittedFunction:
    basis: Basis
    coefficients: np.ndarray
    bound: float = math.inf

    @property
    def arity(self) -> int:
        return self.coefficients.shape[2]

    def raw(self, x: np.ndarray, design=None) -> np.ndarray:
        cells, local = self.basis.design(x) if design is None else design
        inside = cells >= 0
        coef = self.coefficients[np.where(inside, cells, 0)]
        if self.basis.local_dim == 1:
            val = coef[:, 0, :] * local
        else:
            val = np.einsum("np,npr->nr", local, coef)
        if not inside.all():
            val[~inside] = 0.0
        return val

    def __call__(self, x: np.ndarray, design=None) -> np.ndarray:
        return truncate(self.raw(x, design), self.bound)


@dataclass(frozen=True)
class ConstantFunction:
    """Constant map, used for level-0 fits at a deterministic initial state."""

    value: np.ndarray
    bound: float = math.inf

    @property
    def arity(self) -> int:
        return len(self.value)

    def __call__(self, x: np.ndarray, design=None) -> np.ndarray:
        return truncate(np.broadcast_to(self.value, (len(x), len(self.value))).copy(), self.bound)


def ols_fit(features: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Coefficients ``(K, r)`` minimising the empirical mean squared residual (minimum norm)."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    responses = np.asarray(responses, dtype=float).reshape(len(features), -1)
    if len(features) < 1 or features.shape[1] < 1:
        raise ValueError("need at least one sample and one basis function")
    _check_finite("feature", features)
    _check_finite("response", responses)
    # SVD on the features themselves: forming the Gram matrix would square the condition number.
    # The cutoff 1e-6 is the design-side equivalent of solve_blocks' 1e-12 on the Gram matrix;
    # directions below it cannot be resolved and only add eps * cond noise to the fitted values.
    coef, *_ = np.linalg.lstsq(features, responses, rcond=1e-6)
    return coef


def partition_fit(basis: HypercubePartition, x: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Per-cell response means, shape ``(n_cells, r)``; empty cells get 0."""
    if not isinstance(basis, HypercubePartition):
        raise TypeError("partition_fit needs a HypercubePartition basis")
    responses = np.asarray(responses, dtype=float).reshape(len(x), -1)
    _check_finite("response", responses)
    cells = basis.cell_index(x)
    inside = cells >= 0
    counts = np.bincount(cells[inside], minlength=basis.n_cells).astype(float)
    sums = np.stack(
        [np.bincount(cells[inside], weights=responses[inside, c], minlength=basis.n_cells) for c in range(responses.shape[1])],
        axis=1,
    )
    safe = np.where(counts > 0, counts, 1.0)
    return np.where(counts[:, None] > 0, sums / safe[:, None], 0.0)


def fit(basis: Basis, x: np.ndarray, responses: np.ndarray, bound: float = math.inf) -> FittedFunction:
    responses = np.asarray(responses, dtype=float).reshape(len(x), -1)
    ne = NormalEquations(basis, responses.shape[1])
    ne.add(x, responses)
    return FittedFunction(basis, ne.solve(), bound)


def export_coefficients(fn: FittedFunction, path: str | Path) -> None:
    """CSV with columns ``cell, local_index, component, coefficient``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "local_index", "component", "coefficient"])
        n_cells, p, r = fn.coefficients.shape
        for cell in range(n_cells):
            for j in range(p):
                for c in range(r):
                    w.writerow([cell, j, c, repr(float(fn.coefficients[cell, j, c]))])
