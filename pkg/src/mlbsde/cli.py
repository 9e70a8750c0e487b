"""Command line entry point: ``mlbsde run|compare|calibrate|oracle-build``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, preset
from .multilevel import MemoryBudgetError

log = logging.getLogger("mlbsde")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment file")
    p.add_argument("--preset", help="built-in experiment: sine-fig1, table-multid, gooddeal")
    p.add_argument("--seed", type=_seed, help="replace the configured seeds by this single seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--mem-budget", type=int, default=None, metavar="BYTES", help="refuse plans estimated above this")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlbsde", description="Multilevel and multistep regression solvers for BSDEs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve, evaluate and write error reports")
    _common(run)
    run.add_argument("--dry-run", action="store_true", help="only resolve and print the plan")

    cmp_ = sub.add_parser("compare", help="per-level MSE ratios and costs of two error reports")
    cmp_.add_argument("report_a", type=Path)
    cmp_.add_argument("report_b", type=Path)
    cmp_.add_argument("--scheme-a")
    cmp_.add_argument("--scheme-b")
    cmp_.add_argument("--basis")
    cmp_.add_argument("--out", type=Path, default=None, help="write compare.csv here")

    cal = sub.add_parser("calibrate", help="print basis sizes and path counts for a target precision")
    cal.add_argument("--epsilon", type=float, required=True)
    cal.add_argument("--dim", type=int, default=1)
    cal.add_argument("--k", type=int, required=True, help="final level")
    cal.add_argument("--beta", type=float, default=1.0)
    cal.add_argument("--theta", type=float, default=1.0)
    cal.add_argument("--c-K", type=float, default=1.0, dest="c_K")
    cal.add_argument("--c-M", type=float, default=1.0, dest="c_M")
    cal.add_argument("--out", type=Path, default=None, help="write schedule.json here")

    ob = sub.add_parser("oracle-build", help="build and store the good-deal reference table")
    ob.add_argument("--out", type=Path, default=Path("oracle"))
    ob.add_argument("--n-x", type=int, default=1001)
    ob.add_argument("--n-tau", type=int, default=1000)
    ob.add_argument("--seed", type=_seed, default=0, help="seed of the cross-check points")
    ob.add_argument("--points", type=int, default=20)
    return ap


def _load(args):
    if (args.config is None) == (args.preset is None):
        raise ConfigError("give exactly one of --config and --preset")
    cfg = load_config(args.config) if args.config else preset(args.preset)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.threads is not None:
        updates["threads"] = args.threads
    if args.mem_budget is not None:
        updates["mem_budget"] = args.mem_budget
    return cfg.model_copy(update=updates) if updates else cfg


def cmd_run(args) -> int:
    from .experiments import execute, resolve_plan, write_artifacts

    cfg = _load(args)
    plan = resolve_plan(cfg)
    print(json.dumps(plan, indent=2, default=str))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "plan.json").write_text(json.dumps(plan, indent=2, default=str))
    if args.dry_run:
        return 0
    result = execute(cfg, plan, progress=lambda m: print(m, file=sys.stderr))
    paths = write_artifacts(result, args.out, cfg)
    for name, p in paths.items():
        print(f"{name}: {p}", file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    from .experiments import compare, format_rows

    rows = compare(args.report_a, args.report_b, args.scheme_a, args.scheme_b, args.basis)
    print(format_rows(rows))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


def cmd_calibrate(args) -> int:
    from .schedules import calibrate_schedule, format_table
    from .timegrid import GridFamily

    s = calibrate_schedule(args.epsilon, args.dim, args.k, GridFamily(1.0, args.beta), args.theta, args.c_K, args.c_M)
    print(format_table(s))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "schedule.json").write_text(json.dumps(s.to_dict(), indent=2))
    return 0


def cmd_oracle_build(args) -> int:
    from .problems import GoodDealParams, gooddeal_agreement, solve_gooddeal_pde

    table = solve_gooddeal_pde(GoodDealParams(), n_x=args.n_x, n_tau=args.n_tau)
    agree = gooddeal_agreement(table, args.points, args.seed)
    table.meta["agreement"] = {
        "points": args.points,
        "seed": args.seed,
        "verified": agree.verified,
        "max_rel_error": agree.max_rel_error(),
        "min_slope": agree.min_slope,
    }
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "gooddeal_table.csv"
    table.to_csv(path)
    print(json.dumps(table.meta["agreement"], indent=2))
    print(f"table: {path}", file=sys.stderr)
    return 0 if agree.verified else 3


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "calibrate": cmd_calibrate, "oracle-build": cmd_oracle_build}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except MemoryBudgetError as exc:
        print(f"memory budget: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
