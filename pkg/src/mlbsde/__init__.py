"""Multilevel and multistep regression schemes for backward SDEs."""

from .timegrid import GridFamily, TimeGrid, alpha, build_grid, grid_diagnostics
from .forward import BrownianMotion, EulerSDE, GeometricBrownian, simulate_cloud
from .regression import HypercubePartition, LocalAffine, NormalEquations, ols_fit, truncate
from .problems import BsdeProblem, ReferenceOracle, make_problem
from .multilevel import LevelSolution, MemoryBudgetError, build_level, init_level0, solve_multilevel, solve_plain
from .lsmdp import ResidualSolution, assemble_split, solve_lsmdp_full, solve_residual
from .evaluation import ErrorReport, fit_loglog, global_mse, global_mse_many
from .schedules import calibrate_schedule

__version__ = "0.1.0"
