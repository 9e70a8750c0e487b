"""Benchmark BSDEs and reference solutions for them.

A problem is the forward model, terminal function and driver; a reference
oracle gives ``y(t, x)`` and ``z(t, x)`` of the continuous-time solution.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded
from scipy.special import ndtr

from . import rng
from .forward import BrownianMotion, ForwardModel, GeometricBrownian
from .timegrid import TimeGrid

CLOSED_FORM = "closed-form"
BRUTE_FORCE = "brute-force"


@dataclass(frozen=True, eq=False)
class BsdeProblem:
    """``Y_t = Phi(X_T) + int_t^T f(s, X_s, Y_s, Z_s) ds - int_t^T Z_s dW_s``.

    ``driver`` is ``None`` for the zero driver, otherwise a vectorised
    ``f(i, t, x[n,d], y[n], z[n,q]) -> [n]`` where ``i`` is the grid index of ``t``.
    """

    name: str
    model: ForwardModel
    terminal: Callable[[np.ndarray], np.ndarray]
    driver: Callable | None = None
    horizon: float = 1.0
    theta: float = 1.0
    theta_L: float = 1.0
    C_phi: float = math.inf
    C_x: float = math.inf
    lipschitz: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for name in ("theta", "theta_L"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def brownian_dim(self) -> int:
        return self.model.brownian_dim

    @property
    def zero_driver(self) -> bool:
        return self.driver is None

    def phi(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.terminal(x), dtype=float).reshape(len(x))

    # a-priori bounds, infinite unless the user supplied the constants
    def bound_y(self) -> float:
        return self.C_phi

    def bound_z(self, grid: TimeGrid, i: int) -> float:
        if math.isinf(self.C_x):
            return math.inf
        return self.C_x / (self.horizon - grid.points[i]) ** ((1.0 - self.theta) / 2)

    def residual_bound_y(self, grid: TimeGrid, i: int) -> float:
        if math.isinf(self.C_x):
            return math.inf
        return self.C_x * (self.horizon - grid.points[i]) ** ((self.theta_L + self.theta) / 2)

    def residual_bound_z(self, grid: TimeGrid, i: int) -> float:
        return self.residual_bound_y(grid, i) / grid.increments[i]

    def describe(self) -> dict:
        return {"name": self.name, "model": repr(self.model), "horizon": self.horizon, **self.params}


@dataclass(frozen=True, eq=False)
class ReferenceOracle:
    """``y(t, x[n,d]) -> [n]`` and ``z(t, x[n,d]) -> [n,q]``."""

    y: Callable
    z: Callable
    kind: str
    name: str = ""


# -- sine payoff on Brownian motion ---------------------------------------------


def sine_problem(horizon: float = 1.0, C_phi: float = math.inf, C_x: float = math.inf) -> tuple[BsdeProblem, ReferenceOracle]:
    """``Phi = sin`` on a Brownian motion.

    ``|y| <= 1`` and ``|z| <= 1`` hold for this payoff, so ``C_phi = C_x = 1``
    are valid a-priori bounds; by default no truncation is applied.
    """
    model = BrownianMotion(1)
    problem = BsdeProblem(
        "sine",
        model,
        lambda x: np.sin(x[:, 0]),
        None,
        horizon,
        C_phi=C_phi,
        C_x=C_x,
        params={"terminal": "sin(x)", "C_phi": C_phi, "C_x": C_x},
    )

    def y(t, x):
        return np.sin(x[:, 0]) * math.exp(-(horizon - t) / 2)

    def z(t, x):
        return (np.cos(x[:, 0]) * math.exp(-(horizon - t) / 2))[:, None]

    return problem, ReferenceOracle(y, z, CLOSED_FORM, "sine")


def _gauss_hermite(n: int):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / math.sqrt(2 * math.pi)


def brownian_quadrature_oracle(terminal: Callable, dim: int, horizon: float = 1.0, nodes: int = 40) -> ReferenceOracle:
    """``y = E[Phi(x + W_tau)]`` and ``z = E[Phi(x + W_tau) W_tau] / tau`` by tensor Gauss-Hermite.

    Independent of any closed form: only the terminal function is used.
    """
    g, w = _gauss_hermite(nodes)
    mesh = np.stack(np.meshgrid(*([g] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    wt = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=1)

    def values(t, x):
        tau = horizon - t
        x = np.asarray(x, dtype=float).reshape(-1, dim)
        out_y = np.empty(len(x))
        out_z = np.empty((len(x), dim))
        for n, pt in enumerate(x):
            phi = np.asarray(terminal(pt + math.sqrt(tau) * mesh), dtype=float).reshape(len(mesh))
            out_y[n] = wt @ phi
            # Gaussian integration by parts: d/dx E[Phi(x + sqrt(tau) N)] = E[Phi N] / sqrt(tau)
            out_z[n] = (wt * phi) @ mesh / math.sqrt(tau) if tau > 0 else np.nan
        return out_y, out_z

    return ReferenceOracle(lambda t, x: values(t, x)[0], lambda t, x: values(t, x)[1], BRUTE_FORCE, "gauss-hermite")


# -- product payoff in dimension three ------------------------------------------------


def product_problem(dim: int = 3, horizon: float = 1.0) -> tuple[BsdeProblem, ReferenceOracle]:
    model = BrownianMotion(dim)
    problem = BsdeProblem("product", model, lambda x: np.prod(x, axis=1), None, horizon, params={"terminal": "prod(x)", "dim": dim})

    def y(t, x):
        return np.prod(x, axis=1)

    def z(t, x):
        out = np.empty_like(x, dtype=float)
        for i in range(x.shape[1]):
            out[:, i] = np.prod(np.delete(x, i, axis=1), axis=1)
        return out

    return problem, ReferenceOracle(y, z, CLOSED_FORM, "product")


def nested_monte_carlo(terminal: Callable, t: float, x, horizon: float, n: int, seed: int):
    """Plain Monte Carlo of ``y`` and ``z`` at one point for Brownian forward dynamics.

    Returns ``(y, se_y, z, se_z)``.
    """
    x = np.asarray(x, dtype=float).ravel()
    tau = horizon - t
    gen = rng.generator(seed, rng.DOMAIN_ORACLE, (len(x),))
    w = gen.standard_normal((n, len(x)))
    phi = np.asarray(terminal(x + math.sqrt(tau) * w), dtype=float)
    zs = phi[:, None] * w / math.sqrt(tau)
    return phi.mean(), phi.std(ddof=1) / math.sqrt(n), zs.mean(axis=0), zs.std(axis=0, ddof=1) / math.sqrt(n)


# -- good-deal bound for an exchange option ----------------------------------------------


@dataclass(frozen=True)
class GoodDealParams:
    """Traded asset S and non-traded asset H, correlated geometric Brownian motions."""

    sigma_s: float = 0.5
    sigma_h: float = 0.5
    rho: float = 0.6
    mu_s: float = 0.0
    gamma: float = 0.1
    h: float = 0.2
    horizon: float = 1.0
    s0: float = 1.0
    h0: float = 1.0

    @property
    def rho_bar(self) -> float:
        return math.sqrt(1.0 - self.rho**2)

    @property
    def spread_vol(self) -> float:
        """Volatility of ``log(H/S)``."""
        return math.sqrt(self.sigma_s**2 + self.sigma_h**2 - 2 * self.rho * self.sigma_s * self.sigma_h)

    @property
    def kappa(self) -> float:
        """Drift added to ``log H`` when the orthogonal Brownian motion is shifted by ``h``."""
        return self.h * self.sigma_h * self.rho_bar


def gooddeal_model(p: GoodDealParams) -> GeometricBrownian:
    factor = [[1.0, 0.0], [p.rho, p.rho_bar]]
    return GeometricBrownian([p.mu_s, p.gamma], [p.sigma_s, p.sigma_h], factor, [p.s0, p.h0])


def gooddeal_problem(p: GoodDealParams = GoodDealParams()) -> tuple[BsdeProblem, ReferenceOracle]:
    """Exchange payoff ``(H_T - S_T)^+`` with driver ``h |z^(2)|``; state ``x = (S, H)``."""
    model = gooddeal_model(p)
    h = p.h

    def driver(i, t, x, y, z):
        return h * np.abs(z[:, 1])

    problem = BsdeProblem(
        "gooddeal",
        model,
        lambda x: np.maximum(x[:, 1] - x[:, 0], 0.0),
        driver if h != 0 else None,
        p.horizon,
        lipschitz=h,
        params=asdict(p),
    )
    return problem, margrabe_oracle(p)


def _margrabe_parts(p: GoodDealParams, t, x):
    tau = p.horizon - t
    s, eta = x[:, 0], x[:, 1]
    fwd_h = eta * math.exp((p.gamma + p.kappa) * tau)
    fwd_s = s * math.exp(p.mu_s * tau)
    vol = p.spread_vol * math.sqrt(tau)
    d1 = (np.log(fwd_h / fwd_s) + 0.5 * vol**2) / vol
    d2 = d1 - vol
    return tau, s, eta, fwd_h, fwd_s, ndtr(d1), ndtr(d2)


def margrabe_oracle(p: GoodDealParams) -> ReferenceOracle:
    """Exchange-option value with the ``H`` drift shifted by ``kappa``.

    Exact for the good-deal BSDE whenever ``z^(2) >= 0`` along the solution,
    since then ``h|z^(2)|`` is linear and acts as a Girsanov shift.
    """

    def y(t, x):
        tau, s, eta, fh, fs, n1, n2 = _margrabe_parts(p, t, x)
        if tau <= 0:
            return np.maximum(eta - s, 0.0)
        return fh * n1 - fs * n2

    def z(t, x):
        tau, s, eta, fh, fs, n1, n2 = _margrabe_parts(p, t, x)
        du_deta = math.exp((p.gamma + p.kappa) * tau) * n1
        du_ds = -math.exp(p.mu_s * tau) * n2
        z1 = p.sigma_s * s * du_ds + p.sigma_h * p.rho * eta * du_deta
        z2 = p.sigma_h * p.rho_bar * eta * du_deta
        return np.stack([z1, z2], axis=1)

    return ReferenceOracle(y, z, CLOSED_FORM, "margrabe")


# The value is homogeneous of degree one in (S, H): u(t, s, eta) = s g(T - t, log(eta/s)).
# g solves g_tau = a g_xx + b g_x + mu_s g + kappa |g_x| with g(0, x) = (e^x - 1)^+,
# a = sigma^2/2 and b = gamma - mu_s - sigma^2/2. Nothing here assumes the sign of g_x.


@dataclass
class GoodDealTable:
    """Value ``g(tau, x)`` on a rectangular grid, with build metadata."""

    tau: np.ndarray
    x: np.ndarray
    g: np.ndarray
    meta: dict

    def __post_init__(self):
        self._spline = RectBivariateSpline(self.tau, self.x, self.g, kx=3, ky=3, s=0)

    @property
    def params(self) -> GoodDealParams:
        return GoodDealParams(**self.meta["params"])

    def value(self, tau, xs):
        return self._spline(tau, xs, grid=False)

    def slope(self, tau, xs):
        return self._spline(tau, xs, dy=1, grid=False)

    def min_slope(self) -> float:
        """Smallest finite-difference ``g_x`` over the table (the sign of ``z^(2)``)."""
        return float(np.min(np.diff(self.g[1:], axis=1)) / (self.x[1] - self.x[0]))

    def oracle(self) -> ReferenceOracle:
        p = self.params

        def y(t, x):
            s, eta = x[:, 0], x[:, 1]
            tau = np.full(len(x), p.horizon - t)
            return s * self.value(tau, np.log(eta / s))

        def z(t, x):
            s, eta = x[:, 0], x[:, 1]
            tau = np.full(len(x), p.horizon - t)
            lx = np.log(eta / s)
            g, gx = self.value(tau, lx), self.slope(tau, lx)
            z1 = s * (p.sigma_s * (g - gx) + p.sigma_h * p.rho * gx)
            z2 = s * p.sigma_h * p.rho_bar * gx
            return np.stack([z1, z2], axis=1)

        return ReferenceOracle(y, z, BRUTE_FORCE, "gooddeal-pde")

    def to_csv(self, path: str | Path) -> None:
        """Table as CSV (``tau, x, g``) plus a JSON sidecar with the build metadata."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "x", "g"])
            for a, tau in enumerate(self.tau):
                for b, xv in enumerate(self.x):
                    w.writerow([repr(float(tau)), repr(float(xv)), repr(float(self.g[a, b]))])
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2))

    @classmethod
    def from_csv(cls, path: str | Path) -> "GoodDealTable":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        tau = np.unique(data[:, 0])
        x = np.unique(data[:, 1])
        g = data[:, 2].reshape(len(tau), len(x))
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(tau, x, g, meta)


def solve_gooddeal_pde(
    p: GoodDealParams = GoodDealParams(),
    n_x: int = 1001,
    n_tau: int = 1000,
    x_range: tuple[float, float] = (-5.0, 5.0),
    keep_every: int = 5,
    smoothing_steps: int = 4,
    picard_tol: float = 1e-13,
    max_picard: int = 50,
) -> GoodDealTable:
    """Crank-Nicolson in ``tau`` with a Picard iteration on the sign of ``g_x``.

    The first ``smoothing_steps`` steps are fully implicit half steps to damp
    the payoff kink.
    """
    x = np.linspace(*x_range, n_x)
    dx = x[1] - x[0]
    dtau = p.horizon / n_tau
    a = 0.5 * p.spread_vol**2
    b0 = p.gamma - p.mu_s - a
    kappa = p.kappa
    g = np.maximum(np.exp(x) - 1.0, 0.0)

    def right_edge(tau):
        return math.exp(x[-1] + (p.gamma + kappa) * tau) - math.exp(p.mu_s * tau)

    def operator(b):
        # tridiagonal coefficients of a D2 + b D1 + mu_s on interior points
        lo = a / dx**2 - b / (2 * dx)
        di = np.full(n_x - 2, -2 * a / dx**2 + p.mu_s)
        up = a / dx**2 + b / (2 * dx)
        return lo, di, up

    def apply(g, lo, di, up):
        return lo * g[:-2] + di * g[1:-1] + up * g[2:]

    stored_tau = [0.0]
    stored = [g.copy()]
    picard_max = 0
    # (half steps, implicitness): implicit half steps first, then Crank-Nicolson
    steps = [(1, 1.0)] * (2 * smoothing_steps) + [(2, 0.5)] * (n_tau - smoothing_steps)
    elapsed = 0
    for halves, th in steps:
        dt = halves * dtau / 2
        elapsed += halves
        tau_new = elapsed * dtau / 2
        sgn = np.sign(g[2:] - g[:-2])
        for it in range(max_picard):
            b = b0 + kappa * sgn
            lo, di, up = operator(b)
            rhs = g[1:-1] + (1 - th) * dt * apply(g, lo, di, up)
            ab = np.zeros((3, n_x - 2))
            ab[0, 1:] = -th * dt * up[:-1]
            ab[1] = 1 - th * dt * di
            ab[2, :-1] = -th * dt * lo[1:]
            # boundary values at the new time level; the left edge is 0
            rhs[-1] += th * dt * up[-1] * right_edge(tau_new)
            inner = solve_banded((1, 1), ab, rhs)
            new = np.concatenate([[0.0], inner, [right_edge(tau_new)]])
            new_sgn = np.sign(new[2:] - new[:-2])
            picard_max = max(picard_max, it + 1)
            if np.array_equal(new_sgn, sgn):
                break
            sgn = new_sgn
        else:
            raise RuntimeError(f"Picard iteration did not settle at tau={tau_new}")
        g = new
        if elapsed % (2 * keep_every) == 0:
            stored_tau.append(tau_new)
            stored.append(g.copy())
    if stored_tau[-1] != p.horizon:
        stored_tau.append(p.horizon)
        stored.append(g.copy())
    meta = {
        "params": asdict(p),
        "n_x": n_x,
        "n_tau": n_tau,
        "x_range": list(x_range),
        "smoothing_steps": smoothing_steps,
        "picard_iterations_max": picard_max,
    }
    return GoodDealTable(np.array(stored_tau), x, np.array(stored), meta)


def margrabe_monte_carlo(p: GoodDealParams, n: int, seed: int) -> tuple[float, float]:
    """Plain Monte Carlo of ``E[(H_T - S_T)^+]`` under the physical drifts (mean, standard error)."""
    model = gooddeal_model(p)
    gen = rng.generator(seed, rng.DOMAIN_ORACLE, (2,))
    dw = gen.standard_normal((n, 2)) * math.sqrt(p.horizon)
    x = model.exact_step(0.0, p.horizon, np.broadcast_to(model.x0, (n, 2)), dw)
    pay = np.maximum(x[:, 1] - x[:, 0], 0.0)
    return float(pay.mean()), float(pay.std(ddof=1) / math.sqrt(n))


@dataclass
class OracleAgreement:
    points_t: np.ndarray
    points_x: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    z_a: np.ndarray
    z_b: np.ndarray
    min_slope: float
    rel_tol: float
    abs_floor: float

    @staticmethod
    def _ok(a, b, rel, floor):
        return np.abs(a - b) <= np.maximum(rel * np.abs(b), rel * floor)

    @property
    def y_ok(self) -> np.ndarray:
        return self._ok(self.y_a, self.y_b, self.rel_tol, self.abs_floor)

    @property
    def z_ok(self) -> np.ndarray:
        return self._ok(self.z_a, self.z_b, self.rel_tol, self.abs_floor).all(axis=1)

    @property
    def verified(self) -> bool:
        return bool(self.min_slope >= -1e-8 and self.y_ok.all() and self.z_ok.all())

    def max_rel_error(self) -> float:
        ry = np.abs(self.y_a - self.y_b) / np.maximum(np.abs(self.y_b), self.abs_floor)
        rz = np.abs(self.z_a - self.z_b) / np.maximum(np.abs(self.z_b), self.abs_floor)
        return float(max(ry.max(), rz.max()))


def gooddeal_agreement(
    table: GoodDealTable,
    n_points: int = 20,
    seed: int = 0,
    rel_tol: float = 5e-3,
    abs_floor: float = 1e-2,
    t_max: float = 0.95,
) -> OracleAgreement:
    """Compare the PDE table with the shifted-drift exchange formula at model-distributed points.

    Values below ``abs_floor`` in magnitude are compared in absolute terms
    (``rel_tol * abs_floor``), since relative error is meaningless near zero.
    """
    p = table.params
    model = gooddeal_model(p)
    gen = rng.generator(seed, rng.DOMAIN_ORACLE, (n_points,))
    ts = np.sort(gen.uniform(0.0, t_max * p.horizon, n_points))
    xs = np.empty((n_points, 2))
    for n, t in enumerate(ts):
        dw = gen.standard_normal((1, 2)) * math.sqrt(t)
        xs[n] = model.exact_step(0.0, t, model.x0[None], dw)[0]
    closed = margrabe_oracle(p)
    pde = table.oracle()
    ya = np.array([pde.y(t, xs[n : n + 1])[0] for n, t in enumerate(ts)])
    yb = np.array([closed.y(t, xs[n : n + 1])[0] for n, t in enumerate(ts)])
    za = np.array([pde.z(t, xs[n : n + 1])[0] for n, t in enumerate(ts)])
    zb = np.array([closed.z(t, xs[n : n + 1])[0] for n, t in enumerate(ts)])
    return OracleAgreement(ts, xs, ya, yb, za, zb, table.min_slope(), rel_tol, abs_floor)


# -- generic checks ----------------------------------------------------------------------


def finite_difference_z(oracle: ReferenceOracle, model: ForwardModel, t: float, x: np.ndarray, rel_step: float = 1e-5):
    """``(sigma(t,x)^T grad_x y)`` by central differences."""
    x = np.asarray(x, dtype=float).reshape(-1, model.dim)
    grad = np.empty_like(x)
    for a in range(model.dim):
        h = rel_step * np.maximum(np.abs(x[:, a]), 1.0)
        up, dn = x.copy(), x.copy()
        up[:, a] += h
        dn[:, a] -= h
        grad[:, a] = (oracle.y(t, up) - oracle.y(t, dn)) / (2 * h)
    return np.einsum("naq,na->nq", model.diffusion(t, x), grad)


PROBLEMS = {"sine": sine_problem, "product": product_problem, "gooddeal": gooddeal_problem}


def make_problem(name: str, **kwargs) -> tuple[BsdeProblem, ReferenceOracle]:
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}")
    if name == "gooddeal":
        return gooddeal_problem(GoodDealParams(**kwargs))
    return PROBLEMS[name](**kwargs)
