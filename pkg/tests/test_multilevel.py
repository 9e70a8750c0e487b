import math

import numpy as np
import pytest

from mlbsde import rng
from mlbsde.bases import FixedBasis, HermiteFactory
from mlbsde.forward import BrownianMotion, simulate_block, simulate_cloud
from mlbsde.multilevel import (
    LevelSolution,
    MemoryBudgetError,
    build_level,
    init_level0,
    level0_from_cloud,
    level_responses,
    solve_multilevel,
    solve_plain,
)
from mlbsde.problems import BsdeProblem, sine_problem
from mlbsde.regression import ConstantFunction, DenseBasis, HypercubePartition
from mlbsde.schedules import ml_doubling
from mlbsde.timegrid import GridFamily

FAM = GridFamily()
CONST = FixedBasis(HypercubePartition.whole_space(1), "constant")
AFFINE = FixedBasis(DenseBasis(lambda x: np.stack([np.ones(len(x)), x[:, 0]], 1), 2), "affine")


def const_problem(c=2.5):
    return BsdeProblem("const", BrownianMotion(1), lambda x: np.full(len(x), c))


def identity_problem():
    return BsdeProblem("identity", BrownianMotion(1), lambda x: x[:, 0])


def coefs(sol):
    pick = lambda f: f.coefficients if hasattr(f, "coefficients") else f.value
    return [pick(f) for f in sol.y] + [pick(f) for f in sol.z]


def assert_same(a, b):
    for u, v in zip(coefs(a), coefs(b)):
        np.testing.assert_array_equal(u, v)


def test_level0_constant_payoff():
    m = 50_000
    sol = init_level0(const_problem(), FAM, m, 3)
    assert sol.y_at(0, np.zeros((1, 1)))[0] == 2.5
    assert abs(sol.z_at(0, np.zeros((1, 1)))[0, 0]) <= 4 * 2.5 / math.sqrt(m)
    assert np.array_equal(sol.y_at(1, np.array([[0.3]])), [2.5])


def test_level0_identity_payoff():
    m = 1_000_000
    p = identity_problem()
    sol = init_level0(p, FAM, m, 4)
    cloud = simulate_cloud(p.model, FAM.grid(0), None, m, 4, ids=(0,))
    w = cloud.x[-1, :, 0]
    y0, z0 = sol.y[0].value[0], sol.z[0].value[0]
    assert y0 == pytest.approx(w.mean(), abs=1e-12)
    assert z0 == pytest.approx((w**2).mean(), abs=1e-12)
    assert abs(y0) < 4 / math.sqrt(m)
    assert abs(z0 - 1) < 4 * math.sqrt(2 / m)
    ref = level0_from_cloud(p, cloud)
    assert ref.y[0].value[0] == pytest.approx(y0, abs=1e-12)


def test_level0_single_path():
    p = BsdeProblem("sin", BrownianMotion(1), lambda x: np.sin(x[:, 0]))
    sol = init_level0(p, FAM, 1, 9)
    c = simulate_block(p.model, FAM.grid(0), False, 9, 0, 1, ids=(0,))
    assert sol.y[0].value[0] == np.sin(c.x[-1, 0, 0])
    with pytest.raises(ValueError):
        init_level0(p, FAM, 0, 9)


def test_constant_payoff_levels():
    sols = solve_multilevel(const_problem(), FAM, 3, [4000] * 4, 1, CONST)
    for sol in sols[1:]:
        for i in range(sol.n_steps):
            assert sol.y_at(i, np.zeros((1, 1)))[0] == pytest.approx(2.5, abs=1e-12)
            assert abs(sol.z_at(i, np.zeros((1, 1)))[0, 0]) < 0.5


def test_exact_control_recovers_linear_y():
    p = identity_problem()
    grid0 = FAM.grid(0)
    prev = LevelSolution(0, grid0, (ConstantFunction(np.zeros(1)),), (ConstantFunction(np.ones(1)),), p.phi)
    m = 100_000
    sol = build_level(p, FAM.grid(1), prev, m, 5, AFFINE, AFFINE)
    for i in range(2):
        a, b = sol.y[i].coefficients[0, :, 0]
        # residual W_T - W_{t_i} has variance 1 - t_i; the slope's standard error is about that over sqrt(M t_i)
        assert abs(a) < 4 / math.sqrt(m)
        if i > 0:
            assert abs(b - 1) < 4 * math.sqrt((1 - FAM.grid(1).points[i]) / (m * FAM.grid(1).points[i]))


def test_telescoping_zero_prev_equals_plain():
    p, _ = sine_problem()
    k = 3
    grid = FAM.grid(k)
    zero_prev = LevelSolution(
        k - 1,
        FAM.grid(k - 1),
        tuple(ConstantFunction(np.zeros(1)) for _ in range(4)),
        tuple(ConstantFunction(np.zeros(1)) for _ in range(4)),
        p.phi,
    )
    cloud = simulate_cloud(p.model, grid, grid.coarse(), 5000, 2)
    np.testing.assert_array_equal(level_responses(p, grid, cloud, zero_prev), level_responses(p, grid, cloud, None))
    h = HermiteFactory(3)
    a = build_level(p, grid, zero_prev, 5000, 2, h, h)
    b = build_level(p, grid, None, 5000, 2, h, h, ids=(k,))
    assert_same(a, b)


def test_single_pass_equals_two_pass():
    p, _ = sine_problem()
    h = HermiteFactory(5)
    prev = solve_multilevel(p, FAM, 2, [8000, 4000, 2000], 0, h)[-1]
    a = build_level(p, FAM.grid(3), prev, 20000, 0, h, h, single_pass=True)
    b = build_level(p, FAM.grid(3), prev, 20000, 0, h, h, single_pass=False)
    for u, v in zip(coefs(a), coefs(b)):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-12)
    with pytest.raises(ValueError):
        build_level(p, FAM.grid(3), prev, 100, 0, h, HermiteFactory(5), single_pass=True)


def test_thread_count_does_not_change_results():
    p, _ = sine_problem()
    h = HermiteFactory(4)
    sched = [60000, 40000, 40000]
    a = solve_multilevel(p, FAM, 2, sched, 7, h, threads=1)
    b = solve_multilevel(p, FAM, 2, sched, 7, h, threads=3)
    for u, v in zip(a, b):
        assert_same(u, v)


def test_determinism_and_level_order():
    p, _ = sine_problem()
    h = HermiteFactory(4)
    a = solve_multilevel(p, FAM, 3, [4000] * 4, 11, h)
    # build the levels again with unrelated work in between and a level-3 cloud drawn first
    simulate_cloud(p.model, FAM.grid(3), FAM.grid(2), 4000, 11)
    l0 = init_level0(p, FAM, 4000, 11)
    build_level(p, FAM.grid(1), l0, 999, 12, h, h)
    l1 = build_level(p, FAM.grid(1), l0, 4000, 11, h, h)
    l2 = build_level(p, FAM.grid(2), l1, 4000, 11, h, h)
    l3 = build_level(p, FAM.grid(3), l2, 4000, 11, h, h)
    for u, v in zip(a, [l0, l1, l2, l3]):
        assert_same(u, v)
    c1 = simulate_cloud(p.model, FAM.grid(2), FAM.grid(1), 100, 11)
    simulate_cloud(p.model, FAM.grid(1), FAM.grid(0), 100, 11)
    c2 = simulate_cloud(p.model, FAM.grid(2), FAM.grid(1), 100, 11)
    np.testing.assert_array_equal(c1.x, c2.x)


def test_k_final_zero():
    p, _ = sine_problem()
    a = solve_multilevel(p, FAM, 0, [5000], 1, HermiteFactory())
    b = init_level0(p, FAM, 5000, 1)
    assert len(a) == 1 and a[0].y[0].value[0] == b.y[0].value[0]


def test_truncation_bounds_hold():
    p, _ = sine_problem(C_phi=0.3, C_x=0.2)
    h = HermiteFactory(7)
    sols = solve_multilevel(p, FAM, 3, [400, 200, 100, 50], 2, h)
    x = np.random.default_rng(0).normal(scale=3, size=(10_000, 1))
    for sol in sols:
        g = sol.grid
        for i in range(g.n_steps):
            assert np.all(np.abs(sol.y_at(i, x)) <= 0.3)
            assert np.all(np.abs(sol.z_at(i, x)) <= p.bound_z(g, i))


def test_martingale_sanity():
    p, _ = sine_problem()
    h = HermiteFactory(7)
    k = 4
    prev = solve_multilevel(p, FAM, k - 1, ml_doubling(k - 1, 20000), 3, h)[-1]
    grid = FAM.grid(k)
    cloud = simulate_cloud(p.model, grid, grid.coarse(), 50_000, 3)
    o = level_responses(p, grid, cloud, prev)
    phi = p.phi(cloud.x[-1])
    ctrl = phi - o[0]
    se = ctrl.std(ddof=1) / math.sqrt(len(ctrl))
    assert abs(o[0].mean() - phi.mean()) < 5 * se


def test_variance_reduction():
    p, _ = sine_problem()
    h = HermiteFactory(7)
    k = 6
    prev = solve_multilevel(p, FAM, k - 1, ml_doubling(k - 1, 40 * 8 * 2 ** (k - 1)), 0, h)[-1]
    grid = FAM.grid(k)
    cloud = simulate_cloud(p.model, grid, grid.coarse(), 100_000, 0)
    o = level_responses(p, grid, cloud, prev)
    assert o[0].var(ddof=1) <= p.phi(cloud.x[-1]).var(ddof=1)


def test_errors():
    p, _ = sine_problem()
    h = HermiteFactory(3)
    with pytest.raises(MemoryBudgetError, match="level 2"):
        solve_multilevel(p, FAM, 2, [100, 100, 100000], 0, h, mem_budget=1_000_000)
    with pytest.raises(ValueError, match="schedule"):
        solve_multilevel(p, FAM, 3, [100, 100], 0, h)
    l0 = init_level0(p, FAM, 100, 0)
    with pytest.raises(ValueError, match="level 1"):
        build_level(p, FAM.grid(2), l0, 100, 0, h, h)
    bad = BsdeProblem("bad", BrownianMotion(1), lambda x: np.where(x[:, 0] > 0, np.nan, 0.0))
    with pytest.raises(ValueError, match="non-finite response at time index"):
        build_level(bad, FAM.grid(1), None, 100, 0, h, h)
    driven = BsdeProblem("f", BrownianMotion(1), np.sin, lambda i, t, x, y, z: y)
    with pytest.raises(ValueError, match="zero-driver"):
        solve_multilevel(driven, FAM, 1, [10, 10], 0, h)


def test_plain_scheme_uses_own_cloud():
    p, _ = sine_problem()
    h = HermiteFactory(3)
    a = solve_plain(p, FAM.grid(2), 3000, 0, h)
    b = build_level(p, FAM.grid(2), None, 3000, 0, h, h)
    assert not np.array_equal(a.y[1].coefficients, b.y[1].coefficients)
    assert a.provenance["cloud_ids"] == [2, 1]
    assert solve_plain(p, FAM.grid(0), 100, 0, h).level == 0


def test_graded_family_runs():
    p, oracle = sine_problem()
    fam = GridFamily(1.0, 0.5)
    sols = solve_multilevel(p, fam, 3, [20000] * 4, 0, HermiteFactory(5))
    g = sols[-1].grid
    x = np.linspace(-1, 1, 11)[:, None]
    err = np.abs(sols[-1].y_at(4, x) - oracle.y(g.points[4], x))
    assert err.max() < 0.05
