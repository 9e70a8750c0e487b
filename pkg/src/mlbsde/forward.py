"""Forward Markov chains and coupled simulation clouds.

Arrays are laid out ``[time index][path][component]``.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import rng
from .timegrid import TimeGrid

EXACT = "exact"
EULER_SUBSAMPLE = "euler-subsample"
EULER_COUPLED = "euler-coupled"
MODES = (EXACT, EULER_SUBSAMPLE, EULER_COUPLED)


class ForwardModel:
    """Base class. Subclasses provide drift/diffusion and, optionally, exact steps."""

    dim: int
    brownian_dim: int
    x0: np.ndarray
    has_exact_transition = False

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        """Diffusion matrices, shape ``(n, d, q)``."""
        raise NotImplementedError

    def exact_step(self, t: float, dt: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact transition")

    def euler_step(self, t: float, dt: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        return x + self.drift(t, x) * dt + np.einsum("naq,nq->na", self.diffusion(t, x), dw)

    def default_mode(self) -> str:
        return EXACT if self.has_exact_transition else EULER_SUBSAMPLE

    def step(self, mode: str, t: float, dt: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        if mode == EXACT:
            return self.exact_step(t, dt, x, dw)
        return self.euler_step(t, dt, x, dw)


class BrownianMotion(ForwardModel):
    has_exact_transition = True

    def __init__(self, dim: int = 1, x0=None):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = self.brownian_dim = int(dim)
        self.x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float).reshape(dim)

    def drift(self, t, x):
        return np.zeros_like(x)

    def diffusion(self, t, x):
        return np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim))

    def exact_step(self, t, dt, x, dw):
        return x + dw

    def euler_step(self, t, dt, x, dw):
        return x + dw

    def __repr__(self):
        return f"BrownianMotion(dim={self.dim}, x0={self.x0.tolist()})"


class GeometricBrownian(ForwardModel):
    """``dX^a = X^a (mu_a dt + sigma_a sum_c L_ac dW^c)`` with a ``d x q`` factor ``L``."""

    has_exact_transition = True

    def __init__(self, drifts, vols, factor, x0):
        self.mu = np.asarray(drifts, dtype=float).ravel()
        self.sigma = np.asarray(vols, dtype=float).ravel()
        self.factor = np.atleast_2d(np.asarray(factor, dtype=float))
        self.x0 = np.asarray(x0, dtype=float).ravel()
        self.dim = len(self.x0)
        self.brownian_dim = self.factor.shape[1]
        if not (len(self.mu) == len(self.sigma) == self.factor.shape[0] == self.dim):
            raise ValueError("drifts, vols, factor rows and x0 must share the dimension d")
        if np.any(self.sigma < 0):
            raise ValueError("volatilities must be nonnegative")
        # loading of each component on the Brownian motion, (d, q)
        self._load = self.sigma[:, None] * self.factor
        self._ito = self.mu - 0.5 * np.sum(self._load**2, axis=1)

    def drift(self, t, x):
        return x * self.mu

    def diffusion(self, t, x):
        return x[:, :, None] * self._load[None, :, :]

    def exact_step(self, t, dt, x, dw):
        return x * np.exp(self._ito * dt + dw @ self._load.T)

    def __repr__(self):
        return (
            f"GeometricBrownian(mu={self.mu.tolist()}, sigma={self.sigma.tolist()}, "
            f"factor={self.factor.tolist()}, x0={self.x0.tolist()})"
        )


class EulerSDE(ForwardModel):
    """General SDE given by vectorised drift ``(t, x[n,d]) -> [n,d]`` and diffusion ``-> [n,d,q]``."""

    def __init__(self, drift: Callable, diffusion: Callable, x0, brownian_dim: int):
        self._drift = drift
        self._diffusion = diffusion
        self.x0 = np.asarray(x0, dtype=float).ravel()
        self.dim = len(self.x0)
        self.brownian_dim = int(brownian_dim)

    def drift(self, t, x):
        return self._drift(t, x)

    def diffusion(self, t, x):
        return self._diffusion(t, x)


def resolve_mode(model: ForwardModel, mode: str | None) -> str:
    mode = model.default_mode() if mode is None else mode
    if mode not in MODES:
        raise ValueError(f"unknown simulation mode {mode!r}; expected one of {MODES}")
    if mode == EXACT and not model.has_exact_transition:
        raise ValueError(f"exact transitions are not available for {type(model).__name__}")
    return mode


@dataclass(frozen=True)
class SimulationCloud:
    """Fine paths, coarse paths and fine Brownian increments for ``n_paths`` paths.

    ``x``: (2^k+1, M, d); ``dw``: (2^k, M, q); ``xc``: (2^(k-1)+1, M, d) or None;
    ``dwc``: (2^(k-1), M, q) or None, each coarse increment the sum of the fine
    increments it contains.
    """

    level: int
    x: np.ndarray
    dw: np.ndarray
    xc: np.ndarray | None
    dwc: np.ndarray | None
    seed: int
    mode: str
    start: int = 0

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]


def coarse_increments(fine: TimeGrid, dw: np.ndarray) -> np.ndarray:
    """Sum fine increments over each coarse interval (by time, valid for any nested pair)."""
    coarse = fine.coarse().points
    starts = np.searchsorted(fine.points, coarse[:-1])
    if not np.array_equal(fine.points[starts], coarse[:-1]):
        raise ValueError("grids are not nested")
    return np.add.reduceat(dw, starts, axis=0)


def _forward_path(model, mode, grid: TimeGrid, n: int, dw: np.ndarray, x_start=None) -> np.ndarray:
    pts = grid.points
    x = np.empty((grid.n_steps + 1, n, model.dim))
    x[0] = model.x0 if x_start is None else x_start
    for i in range(grid.n_steps):
        x[i + 1] = model.step(mode, pts[i], pts[i + 1] - pts[i], x[i], dw[i])
    return x


def simulate_block(
    model: ForwardModel,
    fine: TimeGrid,
    coupled: bool,
    seed: int,
    block: int,
    n: int,
    mode: str | None = None,
    domain: int = rng.DOMAIN_MULTILEVEL,
    ids: tuple[int, ...] = (),
    start: int = 0,
) -> SimulationCloud:
    mode = resolve_mode(model, mode)
    if coupled and fine.level == 0:
        raise ValueError("a level-0 grid has no coarse grid to couple with")
    z = rng.normal_block(seed, domain, ids, block, fine.n_steps, n, model.brownian_dim)
    dw = z * np.sqrt(fine.increments)[:, None, None]
    x = _forward_path(model, mode, fine, n, dw)
    xc = dwc = None
    if coupled:
        coarse = fine.coarse()
        dwc = coarse_increments(fine, dw)
        if mode == EULER_COUPLED:
            xc = _forward_path(model, mode, coarse, n, dwc)
        else:
            idx = np.searchsorted(fine.points, coarse.points)
            xc = x[idx]
    return SimulationCloud(fine.level, x, dw, xc, dwc, seed, mode, start)


def iter_cloud_blocks(
    model: ForwardModel,
    fine: TimeGrid,
    n_paths: int,
    seed: int,
    coupled: bool = True,
    mode: str | None = None,
    domain: int = rng.DOMAIN_MULTILEVEL,
    ids: tuple[int, ...] = (),
) -> Iterator[SimulationCloud]:
    for b, start, stop in rng.block_slices(n_paths):
        yield simulate_block(model, fine, coupled, seed, b, stop - start, mode, domain, ids, start)


def simulate_cloud(
    model: ForwardModel,
    fine: TimeGrid,
    coarse: TimeGrid | None,
    n_paths: int,
    seed: int,
    mode: str | None = None,
    domain: int = rng.DOMAIN_MULTILEVEL,
    ids: tuple[int, ...] | None = None,
) -> SimulationCloud:
    """Whole cloud in memory. Solvers stream blocks instead; this is for small runs and inspection."""
    if n_paths < 1:
        raise ValueError("a cloud needs at least one path")
    if coarse is not None:
        if fine.level == 0:
            raise ValueError("k = 0 cannot be coupled with a coarse grid")
        if coarse.level != fine.level - 1 or coarse.family != fine.family:
            raise ValueError("coarse grid must be level k-1 of the same family")
    ids = (fine.level,) if ids is None else ids
    blocks = list(iter_cloud_blocks(model, fine, n_paths, seed, coarse is not None, mode, domain, ids))
    cat = lambda name: None if getattr(blocks[0], name) is None else np.concatenate([getattr(b, name) for b in blocks], axis=1)
    return SimulationCloud(fine.level, cat("x"), cat("dw"), cat("xc"), cat("dwc"), seed, blocks[0].mode)


@dataclass(frozen=True)
class TimepointCloud:
    """Cloud used by the one-time-point regressions at index ``i``.

    ``x`` holds states at indices ``i..2^k`` (shape (2^k-i+1, M, d)), ``dw`` the
    increment over ``[t_i, t_{i+1}]`` (shape (M, q)).
    """

    index: int
    x: np.ndarray
    dw: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]


def simulate_timepoint_block(
    model: ForwardModel,
    grid: TimeGrid,
    i: int,
    seed: int,
    block: int,
    n: int,
    mode: str | None = None,
    ids: tuple[int, ...] | None = None,
) -> TimepointCloud:
    mode = resolve_mode(model, mode)
    ids = (grid.level, i) if ids is None else ids
    pts = grid.points
    if mode == EXACT:
        # jump straight to t_i with one exact transition, then step to T
        rows = grid.n_steps - i + 1
        z = rng.normal_block(seed, rng.DOMAIN_LSMDP, ids, block, rows, n, model.brownian_dim)
        x = np.empty((grid.n_steps - i + 1, n, model.dim))
        x0 = np.broadcast_to(model.x0, (n, model.dim))
        x[0] = model.exact_step(0.0, pts[i], x0, np.sqrt(pts[i]) * z[0]) if i > 0 else x0
        dt = np.diff(pts[i:])
        dws = z[1:] * np.sqrt(dt)[:, None, None]
        for j in range(grid.n_steps - i):
            x[j + 1] = model.exact_step(pts[i + j], dt[j], x[j], dws[j])
        return TimepointCloud(i, x, dws[0].copy())
    z = rng.normal_block(seed, rng.DOMAIN_LSMDP, ids, block, grid.n_steps, n, model.brownian_dim)
    dws = z * np.sqrt(grid.increments)[:, None, None]
    x = _forward_path(model, mode, grid, n, dws)
    return TimepointCloud(i, x[i:].copy(), dws[i].copy())


def iter_timepoint_blocks(model, grid, i, n_paths, seed, mode=None, ids=None) -> Iterator[TimepointCloud]:
    for b, start, stop in rng.block_slices(n_paths):
        yield simulate_timepoint_block(model, grid, i, seed, b, stop - start, mode, ids)


def simulate_per_timepoint_clouds(
    model: ForwardModel,
    grid: TimeGrid,
    counts: Sequence[int],
    seed: int,
    mode: str | None = None,
) -> list[TimepointCloud]:
    if len(counts) != grid.n_steps:
        raise ValueError(f"need one count per time index 0..{grid.n_steps - 1}, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise ValueError("every time point needs at least one simulation")
    clouds = []
    for i, m in enumerate(counts):
        blocks = list(iter_timepoint_blocks(model, grid, i, int(m), seed, mode))
        clouds.append(
            TimepointCloud(i, np.concatenate([b.x for b in blocks], axis=1), np.concatenate([b.dw for b in blocks], axis=0))
        )
    return clouds


def map_blocks(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Apply ``fn`` to every item, returning results in input order whatever the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def sample_marginal(model: ForwardModel, grid: TimeGrid, i: int, n: int, seed: int, domain: int, ids=()) -> np.ndarray:
    """``n`` draws of ``X_{t_i}``, exact when available, else Euler on ``grid``."""
    out = []
    mode = model.default_mode()
    for b, start, stop in rng.block_slices(n):
        m = stop - start
        if mode == EXACT:
            z = rng.normal_block(seed, domain, ids, b, 1, m, model.brownian_dim)[0]
            t = grid.points[i]
            x0 = np.broadcast_to(model.x0, (m, model.dim))
            out.append(model.exact_step(0.0, t, x0, np.sqrt(t) * z) if t > 0 else np.array(x0))
        else:
            z = rng.normal_block(seed, domain, ids, b, grid.n_steps, m, model.brownian_dim)
            dws = z * np.sqrt(grid.increments)[:, None, None]
            out.append(_forward_path(model, mode, grid, m, dws)[i])
    return np.concatenate(out, axis=0)


# -- binary dump -----------------------------------------------------------------
#
# little endian: magic b"BSDC", u32 version, u32 k, u64 M, u32 d, u32 q, u64 seed,
# u8 has_coarse, then float64 arrays x, dw and (if has_coarse) xc, dwc in C order.

_MAGIC = b"BSDC"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQIIQB")


def dump_cloud(cloud: SimulationCloud, path: str | Path) -> None:
    d = cloud.x.shape[2]
    q = cloud.dw.shape[2]
    has_coarse = cloud.xc is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, cloud.level, cloud.n_paths, d, q, cloud.seed & (2**64 - 1), has_coarse))
        arrays = [cloud.x, cloud.dw] + ([cloud.xc, cloud.dwc] if has_coarse else [])
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_cloud(path: str | Path, mode: str = EXACT) -> SimulationCloud:
    raw = Path(path).read_bytes()
    magic, version, k, m, d, q, seed, has_coarse = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a cloud dump (magic={magic!r}, version={version})")
    off = _HEADER.size
    n = 2**k

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) * 8
        a = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(float)
        off += size
        return a

    x = take((n + 1, m, d))
    dw = take((n, m, q))
    xc = dwc = None
    if has_coarse:
        xc = take((n // 2 + 1, m, d))
        dwc = take((n // 2, m, q))
    return SimulationCloud(k, x, dw, xc, dwc, seed, mode)
