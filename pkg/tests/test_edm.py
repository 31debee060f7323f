import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cef.edm import (
    SAMPLING_SCHEDULE,
    TRAINING_SCHEDULE,
    NoiseSchedule,
    precondition,
    precondition_arrays,
    sample_training_sigma,
    schedule_levels,
)


def test_table_parameters():
    assert (SAMPLING_SCHEDULE.sigma_max, SAMPLING_SCHEDULE.sigma_min, SAMPLING_SCHEDULE.rho_sched, SAMPLING_SCHEDULE.n_levels) == (80, 0.03, 7, 20)
    assert (TRAINING_SCHEDULE.sigma_max, TRAINING_SCHEDULE.sigma_min, TRAINING_SCHEDULE.rho_sched) == (88, 0.02, 7)


def test_schedule_validation():
    for bad in [(1.0, 2.0, 7, 5), (1.0, 0.0, 7, 5), (2.0, 1.0, 0.0, 5), (2.0, 1.0, 7, 0)]:
        with pytest.raises(ValueError):
            NoiseSchedule(*bad)


def test_levels_examples():
    lv = schedule_levels(SAMPLING_SCHEDULE)
    assert len(lv) == 21 and lv[0] == 80.0 and lv[19] == 0.03 and lv[20] == 0.0
    assert np.array_equal(schedule_levels(NoiseSchedule(5.0, 0.5, 7, 2)), [5.0, 0.5, 0.0])
    assert np.array_equal(schedule_levels(NoiseSchedule(5.0, 0.5, 7, 1)), [5.0, 0.0])
    assert np.allclose(schedule_levels(NoiseSchedule(2.0, 1e-300, 1.0, 3)), [2, 1, 0, 0], atol=1e-15)
    # independent evaluation of the interpolation formula
    i = np.arange(20)
    ref = (80 ** (1 / 7) + i / 19 * (0.03 ** (1 / 7) - 80 ** (1 / 7))) ** 7
    assert np.allclose(lv[:20], ref, rtol=1e-13)


@given(
    st.floats(0.1, 1e3), st.floats(1e-4, 0.99), st.floats(0.5, 10), st.integers(2, 60)
)
def test_levels_strictly_decreasing(smax, frac, rho, n):
    lv = schedule_levels(NoiseSchedule(smax, smax * frac, rho, n))
    assert np.all(np.diff(lv) < 0)


def test_precondition_examples():
    c = precondition(0.0)
    assert (c.c_skip, c.c_out, c.c_in) == (1.0, 0.0, 1.0)
    c = precondition(1.0)
    assert c.c_skip == 0.5 and c.c_noise == 0
    assert c.c_out == pytest.approx(2**-0.5, rel=1e-15) and c.c_in == pytest.approx(2**-0.5, rel=1e-15)
    c = precondition(80.0)
    assert c.c_skip == 1 / 6401 and abs(c.c_in - 1 / math.sqrt(6401)) < 1e-18 and c.c_noise == 0.25 * math.log(80)
    with pytest.raises(ValueError):
        precondition(-1e-9)


def test_precondition_identities_log_grid():
    for s in np.logspace(-3, 3, 60):
        for sd in (1.0, 0.5):
            c = precondition(s, sd)
            assert abs(c.c_skip**2 * (s * s + sd * sd) + c.c_out**2 - sd * sd) <= 1e-12 * sd * sd
            assert abs(c.c_in**2 * (s * s + sd * sd) - 1) <= 1e-12
    arr = precondition_arrays(np.logspace(-3, 3, 60))
    ref = [precondition(s) for s in np.logspace(-3, 3, 60)]
    assert np.array_equal(arr[0], [c.c_skip for c in ref])
    assert np.array_equal(arr[3], [c.c_noise for c in ref])


def test_training_sigma_examples():
    assert sample_training_sigma(0.0) == pytest.approx(88, rel=1e-14)
    assert sample_training_sigma(1.0) == pytest.approx(0.02, rel=1e-14)
    assert sample_training_sigma(0.5) == pytest.approx(((88 ** (1 / 7) + 0.02 ** (1 / 7)) / 2) ** 7, rel=1e-14)
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(ValueError):
            sample_training_sigma(bad)


def test_training_sigma_quantiles():
    n = 1_000_000
    s = sample_training_sigma(np.random.default_rng(0).random(n))
    assert s.min() >= 0.02 and s.max() <= 88
    # sigma decreases in u, so its q-quantile is F^-1(1 - q). The sampled
    # quantile carries ~sqrt(q(1-q)/n) noise in u, which |d ln sigma / du|
    # (about 8 here) amplifies; 1e-3 relative in sigma is below that floor
    # at 1e6 draws, so the check is made on the CDF scale.
    for q in (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99):
        ref = sample_training_sigma(1 - q)
        assert abs(np.mean(s <= ref) - q) < 4 * math.sqrt(q * (1 - q) / n), q


def test_training_sigma_numerical_cdf_inversion():
    # invert F^-1 by bisection and compare with the closed form at u = 0.5
    target = sample_training_sigma(0.5)
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if sample_training_sigma(mid) > target:
            lo = mid
        else:
            hi = mid
    assert abs(lo - 0.5) < 1e-12
