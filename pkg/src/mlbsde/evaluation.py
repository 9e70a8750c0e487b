"""Mean squared errors against reference solutions on fresh evaluation clouds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng
from .forward import ForwardModel, iter_cloud_blocks, sample_marginal
from .problems import ReferenceOracle
from .regression import Basis, FittedFunction, NormalEquations
from .timegrid import TimeGrid

SCHEMES = ("ML", "MDP", "MDP1", "MDP2", "SPLIT")


@dataclass
class ErrorReport:
    """Per-time mean squared errors of one approximation on one grid.

    ``mse_y[i]`` and ``mse_z[i]`` are sample means of ``|y_hat - y|^2`` and
    ``|z_hat - z|^2`` at ``t_i``; ``se_*`` their standard errors.
    """

    scheme: str
    level: int
    dt: np.ndarray
    mse_y: np.ndarray
    mse_z: np.ndarray
    se_y: np.ndarray
    se_z: np.ndarray
    n_eval: int
    seed: int
    provenance: dict = field(default_factory=dict)

    @property
    def y_max(self) -> float:
        return float(np.max(self.mse_y))

    @property
    def y_mean(self) -> float:
        return float(np.mean(self.mse_y))

    @property
    def y_start(self) -> float:
        return float(self.mse_y[0])

    @property
    def z_sum(self) -> float:
        return float(np.sum(self.mse_z * self.dt))

    @property
    def total(self) -> float:
        return self.y_max + self.z_sum

    def aggregates(self) -> dict:
        return {
            "mseY_max": self.y_max,
            "mseY_mean": self.y_mean,
            "mseY_t0": self.y_start,
            "mseZ": self.z_sum,
            "mse_total": self.total,
        }

    def to_rows(self) -> list[dict]:
        agg = self.aggregates()
        return [
            {
                "scheme": self.scheme,
                "k": self.level,
                "i": i,
                "mseY_i": float(self.mse_y[i]),
                "mseZ_i": float(self.mse_z[i]),
                "dt_i": float(self.dt[i]),
                **agg,
            }
            for i in range(len(self.dt))
        ]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "k": self.level,
            "n_eval": self.n_eval,
            "seed": self.seed,
            "dt": self.dt.tolist(),
            "mseY": self.mse_y.tolist(),
            "mseZ": self.mse_z.tolist(),
            "seY": self.se_y.tolist(),
            "seZ": self.se_z.tolist(),
            **self.aggregates(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorReport":
        return cls(
            d["scheme"],
            d["k"],
            np.array(d["dt"]),
            np.array(d["mseY"]),
            np.array(d["mseZ"]),
            np.array(d["seY"]),
            np.array(d["seZ"]),
            d["n_eval"],
            d["seed"],
            d.get("provenance", {}),
        )


REPORT_COLUMNS = ["scheme", "k", "i", "mseY_i", "mseZ_i", "dt_i", "mseY_max", "mseY_mean", "mseY_t0", "mseZ", "mse_total"]


def write_reports_csv(reports: Sequence[ErrorReport], path: str | Path, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            for key, val in header.items():
                fh.write(f"# {key}: {val}\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerows(r.to_rows())


def write_reports_json(reports: Sequence[ErrorReport], path: str | Path, header: dict | None = None) -> None:
    Path(path).write_text(json.dumps({**(header or {}), "reports": [r.to_dict() for r in reports]}, indent=2))


def read_reports_json(path: str | Path) -> tuple[dict, list[ErrorReport]]:
    data = json.loads(Path(path).read_text())
    reports = [ErrorReport.from_dict(d) for d in data.pop("reports")]
    return data, reports


def global_mse_many(
    approximations: Mapping[str, object],
    oracle: ReferenceOracle,
    grid: TimeGrid,
    model: ForwardModel,
    n_eval: int,
    seed: int,
    mode: str | None = None,
) -> dict[str, ErrorReport]:
    """Errors of several approximations on one shared evaluation cloud.

    Each approximation exposes ``y_at(i, x) -> [n]`` and ``z_at(i, x) -> [n, q]``.
    """
    if oracle is None:
        raise ValueError("no reference solution available for this problem")
    if n_eval < 2:
        raise ValueError("need at least two evaluation paths")
    n = grid.n_steps
    names = list(approximations)
    # per name, per time: sums of e and e^2 for both errors
    s = {nm: np.zeros((4, n)) for nm in names}
    for c in iter_cloud_blocks(model, grid, n_eval, seed, False, mode, rng.DOMAIN_EVAL, (grid.level,)):
        for i in range(n):
            t = grid.points[i]
            x = c.x[i]
            y_ref = oracle.y(t, x)
            z_ref = oracle.z(t, x)
            for nm in names:
                a = approximations[nm]
                ey = (a.y_at(i, x) - y_ref) ** 2
                ez = np.sum((a.z_at(i, x) - z_ref) ** 2, axis=1)
                s[nm][:, i] += (ey.sum(), (ey**2).sum(), ez.sum(), (ez**2).sum())
    out = {}
    for nm in names:
        m1y, m2y, m1z, m2z = s[nm] / n_eval
        se_y = np.sqrt(np.maximum(m2y - m1y**2, 0.0) / (n_eval - 1))
        se_z = np.sqrt(np.maximum(m2z - m1z**2, 0.0) / (n_eval - 1))
        prov = getattr(approximations[nm], "provenance", {})
        out[nm] = ErrorReport(nm, grid.level, grid.increments.copy(), m1y, m1z, se_y, se_z, n_eval, seed, dict(prov))
    return out


def global_mse(approx, oracle: ReferenceOracle, grid: TimeGrid, model: ForwardModel, n_eval: int, seed: int, scheme: str = "ML", mode=None) -> ErrorReport:
    return global_mse_many({scheme: approx}, oracle, grid, model, n_eval, seed, mode)[scheme]


class OracleApproximation:
    """Wraps an oracle, optionally shifted, as an approximation (for checks of the metric)."""

    def __init__(self, oracle: ReferenceOracle, grid: TimeGrid, y_shift: float = 0.0):
        self.oracle, self.grid, self.y_shift = oracle, grid, y_shift

    def y_at(self, i, x):
        return self.oracle.y(self.grid.points[i], x) + self.y_shift

    def z_at(self, i, x):
        return self.oracle.z(self.grid.points[i], x)


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    x: tuple
    y: tuple
    residuals: tuple

    def predict(self, x):
        return self.slope * np.asarray(x) + self.intercept


def fit_loglog(log2_n: Sequence[float], mse: Sequence[float]) -> LineFit:
    """Least-squares line through ``(log2 N, log2 MSE)``."""
    x = np.asarray(log2_n, dtype=float)
    if len(x) < 3:
        raise ValueError("a convergence fit needs at least three levels")
    y = np.log2(np.asarray(mse, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    res = y - (slope * x + intercept)
    return LineFit(float(slope), float(intercept), tuple(x.tolist()), tuple(y.tolist()), tuple(res.tolist()))


def convergence_study(run: Callable[[int, int], float], levels: Sequence[int], seeds: Sequence[int]) -> tuple[LineFit, dict]:
    """``run(k, seed) -> MSE``; log2 MSE is averaged over seeds (a geometric mean) before the fit."""
    levels = list(levels)
    if len(levels) < 3:
        raise ValueError("a convergence study needs at least three levels")
    per = {k: [float(run(k, s)) for s in seeds] for k in levels}
    means = [float(2 ** np.mean(np.log2(per[k]))) for k in levels]
    return fit_loglog(levels, means), per


def empirical_bias(
    basis: Basis,
    target: Callable[[np.ndarray], np.ndarray],
    model: ForwardModel,
    grid: TimeGrid,
    i: int,
    n_probe: int,
    seed: int,
) -> tuple[float, float]:
    """Residual mean square of the least-squares fit of ``target(X_{t_i})`` on ``basis``.

    Fit and residual are computed on independent samples; returns ``(estimate, standard error)``.
    """
    fit_x = sample_marginal(model, grid, i, n_probe, seed, rng.DOMAIN_PROBE, (grid.level, i, 1))
    test_x = sample_marginal(model, grid, i, n_probe, seed, rng.DOMAIN_PROBE, (grid.level, i, 2))
    vals = np.asarray(target(fit_x), dtype=float).reshape(n_probe, -1)
    ne = NormalEquations(basis, vals.shape[1])
    ne.add(fit_x, vals)
    fn = FittedFunction(basis, ne.solve())
    err = np.sum((fn(test_x) - np.asarray(target(test_x), dtype=float).reshape(n_probe, -1)) ** 2, axis=1)
    return float(err.mean()), float(err.std(ddof=1) / math.sqrt(n_probe))
