"""Resolve an experiment configuration into a run plan, execute it, write CSV/JSON artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import schedules
from .bases import EquiprobableFactory, HermiteFactory, UniformBoxFactory
from .config import BasisSpec, ExperimentConfig
from .evaluation import ErrorReport, fit_loglog, global_mse_many, read_reports_json, write_reports_csv, write_reports_json
from .lsmdp import assemble_split, estimate_lsmdp_bytes, solve_lsmdp_full, solve_residual
from .multilevel import (
    build_level,
    check_memory,
    estimate_level_bytes,
    init_level0,
    solve_plain,
)
from .problems import gooddeal_agreement, make_problem, solve_gooddeal_pde
from .timegrid import GridFamily

log = logging.getLogger(__name__)

TAGS = {"ml": "ML", "mdp": "MDP", "mdp2": "MDP2", "split-ml": "SPLIT", "split-mdp": "SPLIT-MDP"}


def scheme_tag(scheme: str, cfg: ExperimentConfig) -> str:
    if scheme == "mdp" and cfg.schedule.kind == "sine":
        return "MDP1"
    return TAGS[scheme]


def make_basis_factory(spec: BasisSpec, model, seed: int = 0):
    if spec.kind == "hermite":
        if model.dim != 1:
            raise ValueError("the Hermite basis is one-dimensional")
        return HermiteFactory(spec.degree, float(model.x0[0]))
    if spec.kind in ("equiprobable", "equiprobable-affine"):
        return EquiprobableFactory(model, spec.cells_per_axis, spec.kind.endswith("affine"), spec.probe_size, seed)
    return UniformBoxFactory(spec.low, spec.high, spec.cells_per_axis, model.dim, spec.kind.endswith("affine"))


def basis_dimension(spec: BasisSpec, dim: int) -> int:
    if spec.kind == "hermite":
        return spec.degree + 1
    cells = spec.cells_per_axis**dim
    return cells * (1 + dim) if spec.kind.endswith("affine") else cells


# -- plan -----------------------------------------------------------------------------


def _sizes(cfg: ExperimentConfig, scheme: str, k: int, K: int, dim: int) -> dict:
    s = cfg.schedule
    if s.kind == "sine":
        ml = schedules.ml_doubling(k, s.factor * K * 2**k)
        mdp = s.factor * K * (4**k if scheme == "mdp2" else 2**k)
        res = ml[-1]
    elif s.kind == "constant":
        ml = schedules.constant_schedule(k, s.M)
        mdp = s.M * (2**k if scheme == "mdp2" else 1)
        res = s.M
    elif s.kind == "explicit":
        if k not in s.ml and scheme in ("ml", "split-ml"):
            raise ValueError(f"explicit schedule has no ML sizes for k={k}")
        ml = list(s.ml.get(k, []))
        mdp = int(s.mdp.get(k, s.M))
        res = ml[-1] if ml else mdp
    else:
        cal = schedules.calibrate_schedule(s.epsilon, dim, k, GridFamily(1.0, cfg.grid.beta), c_K=s.c_K, c_M=s.c_M)
        ml = cal.sizes
        mdp = cal.mdp_size
        res = ml[-1]
    if s.residual is not None:
        res = s.residual
    return {"ml": [int(m) for m in ml], "mdp": int(mdp), "residual": int(res)}


def run_cost(scheme: str, k: int, sizes: dict, driver: bool) -> int:
    n = 2**k
    lsmdp = sum((n - i) * sizes["residual"] for i in range(n))
    if scheme == "ml":
        return schedules.cost(sizes["ml"])
    if scheme in ("mdp", "mdp2"):
        if driver:
            return sum((n - i) * sizes["mdp"] for i in range(n))
        return sizes["mdp"] * n
    if scheme == "split-ml":
        return schedules.cost(sizes["ml"]) + (lsmdp if driver else 0)
    return sizes["mdp"] * n + (lsmdp if driver else 0)


def resolve_plan(cfg: ExperimentConfig) -> dict:
    problem, _ = make_problem(cfg.problem.name, **cfg.problem.params)
    driver = problem.driver is not None
    runs = []
    for b in cfg.bases:
        K = basis_dimension(b, problem.dim)
        for seed in cfg.seeds:
            for k in range(cfg.grid.k_min, cfg.grid.k_max + 1):
                for scheme in cfg.schemes:
                    sizes = _sizes(cfg, scheme, k, K, problem.dim)
                    runs.append(
                        {
                            "scheme": scheme,
                            "tag": scheme_tag(scheme, cfg),
                            "basis": b.name,
                            "k": k,
                            "seed": seed,
                            "eval_seed": seed if cfg.eval_seed is None else cfg.eval_seed,
                            **sizes,
                            "cost": run_cost(scheme, k, sizes, driver),
                        }
                    )
    plan = {
        "name": cfg.name,
        "problem": {"name": cfg.problem.name, "params": cfg.problem.params, "resolved": problem.describe()},
        "schemes": cfg.schemes,
        "grid": cfg.grid.model_dump(),
        "bases": [b.model_dump() for b in cfg.bases],
        "residual_basis": None if cfg.residual_basis is None else cfg.residual_basis.model_dump(),
        "schedule": cfg.schedule.model_dump(),
        "seeds": cfg.seeds,
        "n_eval": cfg.n_eval,
        "mode": cfg.mode,
        "mem_budget": cfg.mem_budget,
        "runs": runs,
    }
    plan["plan_hash"] = plan_hash(plan)
    plan["threads"] = cfg.threads
    return plan


def plan_hash(plan: dict) -> str:
    body = {k: v for k, v in plan.items() if k not in ("plan_hash", "threads")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- execution ----------------------------------------------------------------------


@dataclass
class RunResult:
    plan: dict
    reports: list[ErrorReport]
    timings: list[dict]
    oracle: dict = field(default_factory=dict)

    def mean_report_values(self, tag: str, basis: str, k: int, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.reports if r.scheme == tag and r.level == k and r.provenance.get("basis") == basis]
        return float(np.mean(vals))


def _check_budget(cfg, plan, problem, factories, family):
    if cfg.mem_budget is None:
        return
    linear = dataclasses.replace(problem, driver=None)
    for r in plan["runs"]:
        g = family.grid(r["k"])
        fy = factories[r["basis"]]
        where = f"{r['scheme']} k={r['k']} basis={r['basis']}"
        if r["scheme"] in ("ml", "split-ml"):
            for j in range(1, r["k"] + 1):
                est = estimate_level_bytes(linear, family.grid(j), r["ml"][j], fy, fy, cfg.threads)
                check_memory(est, cfg.mem_budget, f"{where}, level {j}")
        elif problem.driver is not None and r["scheme"] in ("mdp", "mdp2"):
            check_memory(estimate_lsmdp_bytes(problem, g, [r["mdp"]] * g.n_steps), cfg.mem_budget, where)
        elif r["k"] >= 1:
            check_memory(estimate_level_bytes(linear, g, r["mdp"], fy, fy, cfg.threads), cfg.mem_budget, where)
        if problem.driver is not None and r["scheme"].startswith("split"):
            check_memory(estimate_lsmdp_bytes(problem, g, [r["residual"]] * g.n_steps), cfg.mem_budget, f"{where}, residual")


class _Chain:
    """Multilevel solutions built incrementally and reused while the schedule prefix agrees."""

    def __init__(self, problem, family, seed, fy, fz, mode, threads, timings, meta):
        self.args = (problem, family, seed, fy, fz, mode, threads)
        self.levels, self.sched = [], []
        self.timings, self.meta = timings, meta

    def get(self, sched: list[int]):
        problem, family, seed, fy, fz, mode, threads = self.args
        n = 0
        while n < min(len(self.levels), len(sched)) and self.sched[n] == sched[n]:
            n += 1
        del self.levels[n:], self.sched[n:]
        for j in range(n, len(sched)):
            t0 = time.perf_counter()
            if j == 0:
                lv = init_level0(problem, family, sched[0], seed, mode, threads)
            else:
                lv = build_level(problem, family.grid(j), self.levels[-1], sched[j], seed, fy, fz, mode, threads)
            self.timings.append({**self.meta, "part": "ml-level", "level": j, "M": sched[j], "seconds": time.perf_counter() - t0})
            self.levels.append(lv)
            self.sched.append(sched[j])
        return self.levels[len(sched) - 1]


def execute(cfg: ExperimentConfig, plan: dict | None = None, progress=None) -> RunResult:
    plan = resolve_plan(cfg) if plan is None else plan
    problem, oracle = make_problem(cfg.problem.name, **cfg.problem.params)
    linear = dataclasses.replace(problem, driver=None)
    family = GridFamily(problem.horizon, cfg.grid.beta)
    oracle_info = {"kind": oracle.kind, "name": oracle.name, "verified": True}
    if cfg.problem.name == "gooddeal":
        table = solve_gooddeal_pde(make_problem_params(cfg))
        agree = gooddeal_agreement(table)
        oracle_info.update(verified=agree.verified, max_rel_error=agree.max_rel_error(), min_slope=agree.min_slope)
        if not agree.verified:
            warnings.warn("good-deal reference solutions disagree; reports are marked unverified", stacklevel=2)
    factories = {b.name: make_basis_factory(b, problem.model, seed=0) for b in cfg.bases}
    res_factory = None if cfg.residual_basis is None else make_basis_factory(cfg.residual_basis, problem.model, seed=1)
    _check_budget(cfg, plan, problem, factories, family)
    reports, timings = [], []
    groups: dict = {}
    for r in plan["runs"]:
        groups.setdefault((r["basis"], r["seed"], r["k"]), []).append(r)
    chains: dict = {}
    for (bname, seed, k), runs in groups.items():
        fy = factories[bname]
        fres = res_factory or fy
        grid = family.grid(k)
        approx, meta = {}, {}
        for r in runs:
            info = {"scheme": r["scheme"], "basis": bname, "seed": seed, "k": k}
            t0 = time.perf_counter()
            scheme = r["scheme"]
            if scheme in ("ml", "split-ml"):
                key = (bname, seed)
                if key not in chains:
                    chains[key] = _Chain(linear, family, seed, fy, fy, cfg.mode, cfg.threads, timings, {"basis": bname, "seed": seed})
                sol = chains[key].get(r["ml"])
            elif problem.driver is not None and scheme in ("mdp", "mdp2"):
                sol = solve_lsmdp_full(problem, grid, [r["mdp"]] * grid.n_steps, seed, fy, mode=cfg.mode)
            else:
                sol = solve_plain(linear, grid, r["mdp"], seed, fy, mode=cfg.mode, threads=cfg.threads)
            if scheme.startswith("split"):
                resid = solve_residual(problem, sol, [r["residual"]] * grid.n_steps, seed, fres, mode=cfg.mode)
                sol = assemble_split(sol, resid)
            timings.append({**info, "part": "solve", "level": k, "M": r["mdp"] if "mdp" in scheme else r["ml"][-1], "seconds": time.perf_counter() - t0})
            approx[r["tag"]] = sol
            meta[r["tag"]] = r
        t0 = time.perf_counter()
        out = global_mse_many(approx, oracle, grid, problem.model, cfg.n_eval, runs[0]["eval_seed"], cfg.mode)
        timings.append({"scheme": "*", "basis": bname, "seed": seed, "k": k, "part": "evaluate", "level": k, "M": cfg.n_eval, "seconds": time.perf_counter() - t0})
        for tag, rep in out.items():
            r = meta[tag]
            rep.provenance = {
                "basis": bname,
                "seed": seed,
                "scheme_name": r["scheme"],
                "cost": r["cost"],
                "ml_schedule": r["ml"],
                "mdp_size": r["mdp"],
                "residual_size": r["residual"],
                "oracle_verified": oracle_info["verified"],
                "plan_hash": plan["plan_hash"],
            }
            reports.append(rep)
        if progress:
            progress(f"k={k} basis={bname} seed={seed}: " + ", ".join(f"{t} {o.total:.4g}" for t, o in out.items()))
    return RunResult(plan, reports, timings, oracle_info)


def make_problem_params(cfg: ExperimentConfig):
    from .problems import GoodDealParams

    return GoodDealParams(**cfg.problem.params)


# -- summaries and artifacts -----------------------------------------------------------------


def _y_attr(cfg_or_plan_aggregate: str) -> str:
    return {"max": "y_max", "mean": "y_mean", "t0": "y_start"}[cfg_or_plan_aggregate]


def convergence_rows(result: RunResult) -> list[dict]:
    """Per (scheme, basis, log2 N): geometric mean over seeds of the total, Y and Z errors, plus the fitted line."""
    keys = sorted({(r.scheme, r.provenance["basis"]) for r in result.reports})
    rows = []
    for tag, basis in keys:
        ks = sorted({r.level for r in result.reports if r.scheme == tag and r.provenance["basis"] == basis})
        pts = []
        for k in ks:
            sel = [r for r in result.reports if r.scheme == tag and r.provenance["basis"] == basis and r.level == k]
            pts.append(
                (
                    k,
                    float(np.mean([np.log2(r.total) for r in sel])),
                    float(np.mean([np.log2(r.y_max) for r in sel])),
                    float(np.mean([np.log2(r.z_sum) for r in sel])),
                )
            )
        fit = fit_loglog([p[0] for p in pts], [2 ** p[1] for p in pts]) if len(pts) >= 3 else None
        for k, lt, ly, lz in pts:
            rows.append(
                {
                    "scheme": tag,
                    "basis": basis,
                    "log2N": k,
                    "log2MSE": lt,
                    "log2MSE_Y": ly,
                    "log2MSE_Z": lz,
                    "fit_slope": "" if fit is None else fit.slope,
                    "fit_intercept": "" if fit is None else fit.intercept,
                    "fit_log2MSE": "" if fit is None else float(fit.predict(k)),
                }
            )
    return rows


def convergence_lines(result: RunResult) -> dict:
    out = {}
    for row in convergence_rows(result):
        if row["fit_slope"] != "":
            out[(row["scheme"], row["basis"])] = (row["fit_slope"], row["fit_intercept"])
    return out


def table_rows(result: RunResult, y_aggregate: str = "max") -> tuple[list[int], list[dict]]:
    """Rows ``"<scheme> Y (<basis>)"`` / ``"<scheme> Z (<basis>)"`` over levels, averaged over seeds."""
    ks = sorted({r.level for r in result.reports})
    keys = []
    for r in result.reports:
        key = (r.provenance["basis"], r.scheme)
        if key not in keys:
            keys.append(key)
    rows = []
    yattr = _y_attr(y_aggregate)
    for basis, tag in keys:
        for part, attr in (("Y", yattr), ("Z", "z_sum")):
            row = {"row": f"{tag} {part} ({basis})"}
            for k in ks:
                sel = [getattr(r, attr) for r in result.reports if r.scheme == tag and r.provenance["basis"] == basis and r.level == k]
                row[str(k)] = float(np.mean(sel)) if sel else ""
            rows.append(row)
    return ks, rows


def _write_csv(path: Path, rows: list[dict], header: dict, fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        for key, val in header.items():
            fh.write(f"# {key}: {val}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def write_artifacts(result: RunResult, out: Path, cfg: ExperimentConfig) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    h = result.plan["plan_hash"]
    header = {"plan_hash": h, "problem": result.plan["problem"]["name"]}
    paths = {}
    paths["plan"] = out / "plan.json"
    paths["plan"].write_text(json.dumps(result.plan, indent=2, default=str))
    paths["errors_csv"] = out / "errors.csv"
    write_reports_csv(result.reports, paths["errors_csv"], header)
    paths["errors_json"] = out / "errors.json"
    write_reports_json(result.reports, paths["errors_json"], {**header, "oracle": result.oracle})
    paths["timings"] = out / "timings.csv"
    _write_csv(paths["timings"], result.timings, header, ["scheme", "basis", "seed", "k", "part", "level", "M", "seconds"])
    rows = convergence_rows(result)
    paths["convergence"] = out / "convergence.csv"
    _write_csv(
        paths["convergence"],
        rows,
        header,
        ["scheme", "basis", "log2N", "log2MSE", "log2MSE_Y", "log2MSE_Z", "fit_slope", "fit_intercept", "fit_log2MSE"],
    )
    ks, trows = table_rows(result, cfg.table_aggregate_y)
    paths["table"] = out / "table.csv"
    _write_csv(paths["table"], trows, header, ["row"] + [str(k) for k in ks])
    return paths


# -- comparison ----------------------------------------------------------------------------------


def _level_means(reports: list[ErrorReport], tag: str, basis: str | None) -> dict[int, dict]:
    out: dict[int, dict] = {}
    sel = [r for r in reports if r.scheme == tag and (basis is None or r.provenance.get("basis") == basis)]
    for k in sorted({r.level for r in sel}):
        rs = [r for r in sel if r.level == k]
        out[k] = {
            "y": float(np.mean([r.y_max for r in rs])),
            "z": float(np.mean([r.z_sum for r in rs])),
            "total": float(np.mean([r.total for r in rs])),
            "cost": int(rs[0].provenance.get("cost", 0)),
        }
    return out


def _only_scheme(reports, given, which):
    if given is not None:
        return given
    tags = sorted({r.scheme for r in reports})
    if len(tags) != 1:
        raise ValueError(f"report {which} holds schemes {tags}; choose one")
    return tags[0]


def compare(path_a, path_b, scheme_a=None, scheme_b=None, basis=None) -> list[dict]:
    """Per-level MSE ratios (A / B) and path-step costs of two reports."""
    head_a, rep_a = read_reports_json(path_a)
    head_b, rep_b = read_reports_json(path_b)
    if head_a.get("problem") != head_b.get("problem"):
        raise ValueError(f"reports are for different problems: {head_a.get('problem')} vs {head_b.get('problem')}")
    ta = _only_scheme(rep_a, scheme_a, "A")
    tb = _only_scheme(rep_b, scheme_b, "B")
    ma, mb = _level_means(rep_a, ta, basis), _level_means(rep_b, tb, basis)
    common = sorted(set(ma) & set(mb))
    if not common:
        raise ValueError("the two reports share no level")
    rows = []
    for k in common:
        a, b = ma[k], mb[k]
        rows.append(
            {
                "k": k,
                "scheme_a": ta,
                "scheme_b": tb,
                "mseY_a": a["y"],
                "mseY_b": b["y"],
                "ratioY": a["y"] / b["y"] if b["y"] > 0 else float("nan"),
                "mseZ_a": a["z"],
                "mseZ_b": b["z"],
                "ratioZ": a["z"] / b["z"] if b["z"] > 0 else float("nan"),
                "ratio_total": a["total"] / b["total"] if b["total"] > 0 else float("nan"),
                "cost_a": a["cost"],
                "cost_b": b["cost"],
                "cost_ratio": a["cost"] / b["cost"] if b["cost"] else float("nan"),
            }
        )
    return rows


def format_rows(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    width = {c: max(len(c), *(len(fmt(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.rjust(width[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(fmt(r[c]).rjust(width[c]) for c in cols))
    return "\n".join(lines)
