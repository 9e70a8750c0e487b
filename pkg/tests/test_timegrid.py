import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlbsde.timegrid import GridFamily, alpha, alpha_array, build_grid, grid_diagnostics


def test_uniform_points():
    np.testing.assert_array_equal(GridFamily().grid(2).points, [0, 0.25, 0.5, 0.75, 1])


def test_graded_level1():
    # 1 - (1 - 1/2)^(1/0.5) evaluated as a plain scalar
    np.testing.assert_allclose(GridFamily(1.0, 0.5).grid(1).points, [0.0, 0.75, 1.0], rtol=0, atol=1e-15)


def test_graded_beta_one_is_uniform():
    np.testing.assert_array_equal(GridFamily(1.0, 1.0).grid(3).points, GridFamily.uniform().grid(3).points)


def test_alpha_examples():
    u = GridFamily().grid(3)
    assert alpha(u, 5) == 2
    for k in range(1, 6):
        g = GridFamily().grid(k)
        assert alpha(g, 0) == 0
        assert alpha(g, 2**k) == 2 ** (k - 1)
    g = GridFamily(1.0, 0.5).grid(2)
    assert abs(g.points[1] - 0.4375) < 1e-15
    assert alpha(g, 1) == 0


def test_alpha_rejects_bad_index():
    with pytest.raises(IndexError):
        alpha(GridFamily().grid(2), 5)
    with pytest.raises(ValueError):
        alpha(GridFamily().grid(0), 0)


def test_invalid_family():
    with pytest.raises(ValueError):
        GridFamily(1.0, 1.5)
    with pytest.raises(ValueError):
        GridFamily(0.0)
    with pytest.raises(ValueError):
        build_grid(GridFamily(), -1)


def test_diagnostics_uniform():
    d = grid_diagnostics(GridFamily(), 3, 1.0)
    assert d.C_pi == 1 / 8 and d.R_pi == 1.0
    assert grid_diagnostics(GridFamily(), 4, 1.0).C_pi == 1 / 16


def test_diagnostics_graded():
    # points 0, 7/16, 3/4, 15/16, 1: ratios dt/sqrt(T-t) = 7/16, 5/12, 3/8, 1/4 and dt_i/dt_i+1 = 7/5, 5/3, 3
    d = grid_diagnostics(GridFamily(1.0, 0.5), 2, 0.5)
    assert d.C_pi == pytest.approx(7 / 16, rel=1e-14)
    assert d.R_pi == pytest.approx(3.0, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 10), beta=st.sampled_from([1.0, 0.5, 0.3, 0.8]), horizon=st.sampled_from([1.0, 0.5, 2.0]))
def test_nesting_and_alpha(k, beta, horizon):
    fam = GridFamily(horizon, beta)
    fine, coarse = fam.grid(k), fam.grid(k - 1)
    assert fine.points[0] == 0.0 and fine.points[-1] == horizon
    assert np.all(np.diff(fine.points) > 0)
    # every coarse point reappears bit for bit at the even fine indices
    np.testing.assert_array_equal(fine.points[::2], coarse.points)
    a = alpha_array(fine)
    assert np.all(coarse.points[a] <= fine.points)
    assert np.all(a[:-1] < coarse.n_steps)
    assert np.all(coarse.points[np.minimum(a + 1, coarse.n_steps)][:-1] > fine.points[:-1])
    np.testing.assert_array_equal(a[::2], np.arange(coarse.n_steps + 1))
