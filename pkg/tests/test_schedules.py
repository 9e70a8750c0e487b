import math

import pytest

from mlbsde.schedules import basis_size, calibrate_schedule, cost, ml_doubling, sine_mdp2_size, sine_ml_schedule
from mlbsde.timegrid import GridFamily


def test_published_sine_schedules():
    assert sine_ml_schedule(2) == [1280 * 4, 1280 * 2, 1280]
    assert sine_mdp2_size(3) == 40 * 8 * 64
    assert ml_doubling(0, 7) == [7]
    assert cost([4, 2, 1]) == 4 + 4 + 4


def test_halving_epsilon_scales_top_level():
    a = calibrate_schedule(1e-3, 1, 4)
    b = calibrate_schedule(5e-4, 1, 4)
    assert b.sizes[-1] / a.sizes[-1] == pytest.approx(2**1.5, rel=1e-3)


@pytest.mark.parametrize("k", [2, 4, 6, 8])
def test_basis_size_at_start(k):
    eps = 2.0**-k
    s = calibrate_schedule(eps, 1, 3)
    assert s.cells[0][0] == math.ceil(eps**-0.5 * 1.0**-0.5)
    assert basis_size(eps, 1, 0.25) == math.ceil((0.25 * eps) ** -0.5)


def test_predicted_cost_ratio():
    eps = 2.0**-8
    s = calibrate_schedule(eps, 1, 8)
    ratio = s.predicted_ml / s.predicted_mdp
    assert 0.9 < ratio / (eps * math.log(1 / eps)) < 1.1


def test_graded_family_and_constants():
    s = calibrate_schedule(0.05, 2, 3, GridFamily(1.0, 0.5), c_K=2.0, c_M=0.5)
    assert len(s.sizes) == 4 and all(m >= 1 for m in s.sizes)
    assert all(len(kk) == 2**j for j, kk in enumerate(s.cells))
    # later time points have less time left, hence finer partitions
    assert s.cells[3][-1] >= s.cells[3][0]
    d = s.to_dict()
    assert d["constants"] == {"c_K": 2.0, "c_M": 0.5, "theta": 1.0}
    with pytest.raises(ValueError):
        calibrate_schedule(0.0, 1, 2)
