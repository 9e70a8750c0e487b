import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlbsde.bases import HermiteFactory
from mlbsde.evaluation import (
    REPORT_COLUMNS,
    OracleApproximation,
    convergence_study,
    empirical_bias,
    fit_loglog,
    global_mse,
    global_mse_many,
    read_reports_json,
    write_reports_csv,
    write_reports_json,
)
from mlbsde.forward import BrownianMotion
from mlbsde.multilevel import solve_multilevel
from mlbsde.problems import sine_problem
from mlbsde.regression import HermiteBasis, HypercubePartition
from mlbsde.timegrid import GridFamily

FAM = GridFamily()


def test_oracle_has_zero_error():
    p, oracle = sine_problem()
    g = FAM.grid(3)
    rep = global_mse(OracleApproximation(oracle, g), oracle, g, p.model, 5000, 0)
    assert rep.y_max == 0.0 and rep.z_sum == 0.0


def test_constant_offset():
    p, oracle = sine_problem()
    g = FAM.grid(3)
    rep = global_mse(OracleApproximation(oracle, g, y_shift=0.1), oracle, g, p.model, 5000, 0)
    np.testing.assert_allclose(rep.mse_y, 0.01, rtol=1e-12)
    assert rep.z_sum == 0.0 and rep.y_max == pytest.approx(0.01, rel=1e-12)


def test_shared_cloud_and_determinism():
    p, oracle = sine_problem()
    sols = solve_multilevel(p, FAM, 2, [2000] * 3, 0, HermiteFactory(3))
    g = FAM.grid(2)
    a = global_mse_many({"ML": sols[2], "exact": OracleApproximation(oracle, g)}, oracle, g, p.model, 3000, 4)
    b = global_mse(sols[2], oracle, g, p.model, 3000, 4)
    np.testing.assert_array_equal(a["ML"].mse_y, b.mse_y)
    assert a["ML"].y_max > 0 and a["exact"].y_max == 0
    assert np.all(a["ML"].se_y >= 0)
    with pytest.raises(ValueError):
        global_mse(sols[2], None, g, p.model, 10, 0)


def test_loglog_exact_power_law():
    fit = fit_loglog([2, 3, 4, 5], [2.0**-k for k in [2, 3, 4, 5]])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_loglog([1, 2], [0.5, 0.25])


@settings(max_examples=30, deadline=None)
@given(slope=st.floats(-3, 1), icpt=st.floats(-10, 5))
def test_loglog_recovers_line(slope, icpt):
    ks = np.arange(2, 8)
    fit = fit_loglog(ks, 2.0 ** (slope * ks + icpt))
    assert fit.slope == pytest.approx(slope, abs=1e-9)
    assert fit.intercept == pytest.approx(icpt, abs=1e-8)


def test_convergence_study_geometric_mean():
    # seeds multiply the error by 2 or 1/2, so the geometric mean is the clean power law
    run = lambda k, s: 2.0**-k * (2.0 if s == 0 else 0.5)
    fit, per = convergence_study(run, [2, 3, 4], [0, 1])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert per[3] == [0.25, 0.0625]


def test_empirical_bias():
    model = BrownianMotion(1)
    g = FAM.grid(2)
    est, se = empirical_bias(HypercubePartition.whole_space(1), lambda x: np.full(len(x), 3.0), model, g, 2, 10_000, 0)
    assert est <= 1e-10 and se <= 1e-10
    # sin(x) on a single constant at t = 1/2: residual ~ Var(sin X), X ~ N(0, 1/2)
    est, se = empirical_bias(HypercubePartition.whole_space(1), lambda x: np.sin(x[:, 0]), model, g, 2, 100_000, 0)
    var = 0.5 * (1 - math.exp(-2 * 0.5))
    assert abs(est - var) < 5 * se + 0.01
    # degree-7 Hermite captures almost all of it
    est7, _ = empirical_bias(HermiteBasis(7, math.sqrt(0.5)), lambda x: np.sin(x[:, 0]), model, g, 2, 100_000, 0)
    assert est7 < 1e-5


def test_report_files(tmp_path):
    p, oracle = sine_problem()
    g = FAM.grid(2)
    rep = global_mse(OracleApproximation(oracle, g, 0.2), oracle, g, p.model, 500, 0, scheme="ML")
    rep.provenance = {"basis": "hermite"}
    write_reports_csv([rep], tmp_path / "e.csv", {"plan_hash": "abc"})
    text = (tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "# plan_hash: abc"
    rows = list(csv.DictReader(text[1:]))
    assert list(rows[0]) == REPORT_COLUMNS and len(rows) == 4
    write_reports_json([rep], tmp_path / "e.json", {"problem": "sine"})
    head, back = read_reports_json(tmp_path / "e.json")
    assert head["problem"] == "sine"
    np.testing.assert_array_equal(back[0].mse_y, rep.mse_y)
    assert back[0].provenance == {"basis": "hermite"}
