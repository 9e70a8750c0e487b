import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlbsde import rng
from mlbsde.forward import (
    EULER_COUPLED,
    EULER_SUBSAMPLE,
    BrownianMotion,
    EulerSDE,
    GeometricBrownian,
    dump_cloud,
    load_cloud,
    map_blocks,
    simulate_block,
    simulate_cloud,
    simulate_per_timepoint_clouds,
)
from mlbsde.timegrid import GridFamily

FAM = GridFamily()


def test_normal_block_prefix_stable():
    a = rng.normal_block(7, rng.DOMAIN_MULTILEVEL, (3,), 0, 4, 100, 2)
    b = rng.normal_block(7, rng.DOMAIN_MULTILEVEL, (3,), 0, 4, 10, 2)
    np.testing.assert_array_equal(a[:, :10], b)
    c = rng.normal_block(7, rng.DOMAIN_EVAL, (3,), 0, 4, 10, 2)
    assert not np.array_equal(b, c)


def test_seed_accepts_64_bits():
    x = rng.normal_block(2**64 - 1, 1, (), 0, 1, 3, 1)
    assert np.all(np.isfinite(x))


def test_brownian_is_sum_of_increments():
    model = BrownianMotion(1, [0.3])
    c = simulate_cloud(model, FAM.grid(1), None, 1, seed=5)
    assert c.x[2, 0, 0] == 0.3 + c.dw[0, 0, 0] + c.dw[1, 0, 0]


def test_gbm_zero_increment_ratio():
    model = GeometricBrownian([0.0], [0.5], [[1.0]], [2.0])
    x = model.exact_step(0.0, 0.25, np.array([[2.0]]), np.zeros((1, 1)))
    assert x[0, 0] / 2.0 == pytest.approx(math.exp(-0.03125), rel=1e-15)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 6), beta=st.sampled_from([1.0, 0.5]), seed=st.integers(0, 2**64 - 1), d=st.integers(1, 3))
def test_coupling_exact(k, beta, seed, d):
    fam = GridFamily(1.0, beta)
    model = BrownianMotion(d)
    c = simulate_cloud(model, fam.grid(k), fam.grid(k - 1), 37, seed)
    # coarse increments are sums of fine pairs, coarse states the fine states at shared times
    np.testing.assert_allclose(c.dwc, c.dw[0::2] + c.dw[1::2], rtol=0, atol=1e-14)
    np.testing.assert_array_equal(c.xc, c.x[::2])


def test_subsample_mode_shared_states_bit_equal():
    drift = lambda t, x: -0.5 * x
    diff = lambda t, x: (0.3 + 0.1 * np.sin(x))[:, :, None]
    model = EulerSDE(drift, diff, [0.2], 1)
    for k in range(1, 6):
        c = simulate_cloud(model, FAM.grid(k), FAM.grid(k - 1), 50, 11, mode=EULER_SUBSAMPLE)
        np.testing.assert_array_equal(c.xc, c.x[::2])


def test_coupled_euler_mode_uses_coarse_increments():
    model = EulerSDE(lambda t, x: -x, lambda t, x: np.ones((len(x), 1, 1)), [1.0], 1)
    c = simulate_cloud(model, FAM.grid(3), FAM.grid(2), 20, 4, mode=EULER_COUPLED)
    xc = np.empty_like(c.xc)
    xc[0] = 1.0
    dt = 0.25
    for j in range(4):
        xc[j + 1] = xc[j] - xc[j] * dt + c.dwc[j]
    np.testing.assert_allclose(c.xc, xc, rtol=0, atol=1e-14)


def test_determinism_and_block_regeneration():
    model = BrownianMotion(2)
    g = FAM.grid(3)
    a = simulate_cloud(model, g, g.coarse(), 40000, 9)
    b = simulate_cloud(model, g, g.coarse(), 40000, 9)
    np.testing.assert_array_equal(a.x, b.x)
    # the second block on its own equals the middle slice of the whole cloud
    blk = simulate_block(model, g, True, 9, 1, rng.BLOCK_SIZE, ids=(3,), start=rng.BLOCK_SIZE)
    np.testing.assert_array_equal(blk.x, a.x[:, rng.BLOCK_SIZE : 2 * rng.BLOCK_SIZE])


def test_threads_do_not_change_results():
    items = list(range(7))
    assert map_blocks(lambda i: i * i, items, threads=3) == [i * i for i in items]


def test_per_timepoint_clouds_single_paths():
    model = BrownianMotion(1)
    clouds = simulate_per_timepoint_clouds(model, FAM.grid(1), [1, 1], 3)
    assert [c.n_paths for c in clouds] == [1, 1]
    assert clouds[0].x.shape == (3, 1, 1) and clouds[1].x.shape == (2, 1, 1)
    with pytest.raises(ValueError):
        simulate_per_timepoint_clouds(model, FAM.grid(1), [1, 0], 3)


def test_per_timepoint_clouds_independent():
    m = 100_000
    model = BrownianMotion(1)
    c = simulate_per_timepoint_clouds(model, FAM.grid(1), [m, m], 21)
    a, b = np.sin(c[0].x[-1, :, 0]), np.sin(c[1].x[-1, :, 0])
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(m)


def test_timepoint_cloud_marginals():
    # X_{t_i} ~ N(0, t_i) for Brownian motion
    m = 200_000
    model = BrownianMotion(1)
    g = FAM.grid(2)
    c = simulate_per_timepoint_clouds(model, g, [m] * 4, 2)
    for i in range(1, 4):
        v = c[i].x[0, :, 0].var()
        assert abs(v - g.points[i]) < 5 * g.points[i] * math.sqrt(2 / m)
        np.testing.assert_allclose(c[i].x[1] - c[i].x[0], c[i].dw, rtol=0, atol=1e-14)


def test_dump_roundtrip(tmp_path):
    model = GeometricBrownian([0.0, 0.1], [0.5, 0.4], [[1.0, 0.0], [0.6, 0.8]], [1.0, 1.0])
    c = simulate_cloud(model, FAM.grid(2), FAM.grid(1), 30, 8)
    dump_cloud(c, tmp_path / "c.bin")
    d = load_cloud(tmp_path / "c.bin")
    for name in ("x", "dw", "xc", "dwc"):
        np.testing.assert_array_equal(getattr(c, name), getattr(d, name))
    assert d.seed == 8 and d.level == 2


def test_invalid_coupling():
    with pytest.raises(ValueError):
        simulate_cloud(BrownianMotion(1), FAM.grid(0), FAM.grid(0), 5, 0)
    with pytest.raises(ValueError):
        simulate_cloud(BrownianMotion(1), FAM.grid(3), FAM.grid(1), 5, 0)
