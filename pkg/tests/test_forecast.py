import math

import numpy as np
import pytest

from cef.denoiser import ZeroBackend
from cef.forecast import (
    ForecastPlan,
    ar_baseline,
    deterministic_forecast,
    run_plan,
    sample_many,
)
from cef.grid import ConditioningWindow, GridError
from cef.noise import INF


def test_plan_validation():
    with pytest.raises(ValueError):
        ForecastPlan("SOMETHING")
    with pytest.raises(ValueError):
        ForecastPlan(times=(6, 6))
    with pytest.raises(ValueError):
        ForecastPlan(times=(0, 6))
    with pytest.raises(ValueError):
        ForecastPlan(n_ens=0)
    with pytest.raises(ValueError):
        ForecastPlan(noise_time_unit=0)
    p = ForecastPlan("ARCI", block_times=((6, 12), (3, 6, 9)))
    assert p.steps == 2
    assert p.absolute_lead_times().tolist() == [6, 12, 15, 18, 21]
    assert ForecastPlan(rho="inf").to_dict()["rho"] == "inf"


def test_identities_bit_exact(lg_window, lg_backend):
    times = (6, 12, 18, 24)
    a = run_plan(lg_window, ForecastPlan("CONTINUOUS", times, n_ens=4, master_seed=3), lg_backend)
    b = run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", times, n_ens=4, master_seed=3, rho=0.0), lg_backend)
    c = run_plan(lg_window, ForecastPlan("ARCI", times, steps=1, n_ens=4, master_seed=3), lg_backend)
    assert np.array_equal(a.data, b.data) and np.array_equal(a.data, c.data)
    d = run_plan(lg_window, ForecastPlan("ARCI", (6,), steps=4, n_ens=4, master_seed=3), lg_backend)
    e = ar_baseline(lg_window, 6.0, 4, 4, lg_backend, 3)
    f = run_plan(lg_window, ForecastPlan("AR_BASELINE", (6,), steps=4, n_ens=4, master_seed=3), lg_backend)
    assert np.array_equal(d.data, e.data) and np.array_equal(e.data, f.data)


def test_chunking_and_threads_do_not_change_bits(lg_window, lg_backend, rng, monkeypatch):
    plan = ForecastPlan("CONTINUOUS_OU", (1, 2, 3, 6), n_ens=5, rho=math.log(10), master_seed=1)
    ref = run_plan(lg_window, plan, lg_backend).data
    monkeypatch.setenv("CEF_THREADS", "3")
    assert np.array_equal(run_plan(lg_window, plan, lg_backend).data, ref)
    noise = rng.standard_normal((7,) + lg_window.spec.state_shape)
    cond = lg_window.stack()
    whole = sample_many(noise, 6.0, cond, plan_config(), lg_backend, chunk=256, workers=1)
    for chunk, workers in ((1, 1), (3, 1), (2, 4)):
        assert np.array_equal(sample_many(noise, 6.0, cond, plan_config(), lg_backend, chunk=chunk, workers=workers), whole)


def plan_config():
    from cef.sampler import SamplerConfig

    return SamplerConfig()


def test_member_subset_reproduces(lg_window, lg_backend):
    big = run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", (6, 12), n_ens=6, rho=1.0, master_seed=9), lg_backend)
    small = run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", (6, 12), n_ens=2, rho=1.0, master_seed=9), lg_backend)
    assert np.array_equal(big.data[:2], small.data)


def test_seeds_change_members(lg_window, lg_backend):
    a = run_plan(lg_window, ForecastPlan(n_ens=2, master_seed=0), lg_backend)
    b = run_plan(lg_window, ForecastPlan(n_ens=2, master_seed=1), lg_backend)
    assert not np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data[0], a.data[1])


def test_first_lead_shared_across_rho(lg_window, lg_backend):
    outs = [run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", (1, 2), n_ens=3, rho=r, master_seed=2), lg_backend).data for r in (0.0, 1.0, INF)]
    assert all(np.array_equal(o[:, 0], outs[0][:, 0]) for o in outs)
    assert not np.array_equal(outs[0][:, 1], outs[2][:, 1])


def test_arci_blocks_use_own_member_history(lg_window, lg_backend):
    plan = ForecastPlan("ARCI", (3, 6), steps=2, n_ens=3, master_seed=4)
    fc = run_plan(lg_window, plan, lg_backend)
    assert fc.lead_times.tolist() == [3, 6, 9, 12]
    # rebuild block 2 of member 1 by hand: window = (state at 6h, state at 0h)
    k = 1
    w2 = ConditioningWindow.from_array(lg_window.spec, np.stack([fc.data[k, 1], lg_window.states[0].values]), (0.0, -6.0), 6.0)
    from cef.forecast import _block_noise, sample_many
    from cef.sampler import SamplerConfig

    noise = _block_noise(plan, (3.0, 6.0), lg_window.spec.state_shape, 1, "CONTINUOUS")[k]
    manual = sample_many(noise, np.array([3.0, 6.0]), w2.stack(), SamplerConfig(), lg_backend)
    assert np.array_equal(manual, fc.data[k, 2:])


def test_arci_missing_offset_uses_earlier_boundary(lg_window, lg_backend):
    # 2h blocks with a -6h offset: the -6h slot takes the previous boundary state
    plan = ForecastPlan("ARCI", (2,), steps=3, n_ens=2, master_seed=6)
    fc = run_plan(lg_window, plan, lg_backend)
    from cef.forecast import _block_noise
    from cef.sampler import SamplerConfig

    k = 1
    w3 = ConditioningWindow.from_array(lg_window.spec, np.stack([fc.data[k, 1], fc.data[k, 0]]), (0.0, -6.0), 4.0)
    noise = _block_noise(plan, (2.0,), lg_window.spec.state_shape, 2, "CONTINUOUS")[k]
    assert np.array_equal(sample_many(noise, 2.0, w3.stack(), SamplerConfig(), lg_backend), fc.data[k, 2:])


def test_arci_window_gap_is_reported(linear_gauss, small_grid, lg_backend):
    x = linear_gauss.simulate(12, np.random.default_rng(1))
    spec3 = small_grid
    window = ConditioningWindow.from_array(spec3, x[[12, 6, 0]], (0.0, -6.0, -12.0), 0.0)

    class ThreeSlot:
        lead_time_scale = 240.0

        def raw_apply(self, x, c_noise, t_norm, cond):
            return np.zeros_like(x)

    # at the first boundary (2h) the -12h slot would need two earlier boundaries
    with pytest.raises(GridError, match="-10"):
        run_plan(window, ForecastPlan("ARCI", (2,), steps=2, n_ens=1), ThreeSlot())


def test_mixed_resolution_blocks(lg_window, lg_backend):
    fc = run_plan(lg_window, ForecastPlan("ARCI", block_times=((6,), (1, 2, 3, 6)), n_ens=2), lg_backend)
    assert fc.lead_times.tolist() == [6, 7, 8, 9, 12]
    assert np.all(np.isfinite(fc.data))


def test_provenance_flags_untrained_leads(lg_window):
    backend = ZeroBackend()
    backend.trained_lead_times = (6.0, 12.0)
    fc = run_plan(lg_window, ForecastPlan(times=(6, 9, 24), n_ens=1), backend)
    assert fc.provenance["untrained_leads"] == [9.0, 24.0]
    assert fc.provenance["extrapolated_leads"] == [24.0]
    arci = run_plan(lg_window, ForecastPlan("ARCI", (6, 12), steps=2, n_ens=1), backend)
    assert arci.provenance["untrained_leads"] == []


def test_gp_noise_plan_runs(lg_window, lg_backend):
    fc = run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", (1, 2, 3), n_ens=2, gp_length_scale=0.1), lg_backend)
    assert fc.data.shape[:2] == (2, 3)


class Persistence:
    """MSE model stand-in: returns the most recent window state plus one."""

    def predict(self, cond):
        return cond[:, :1] + 1.0


def test_deterministic_rollout(lg_window):
    traj = deterministic_forecast(lg_window, 6.0, 3, Persistence())
    x0 = lg_window.states[0].values
    for j in range(3):
        assert np.array_equal(traj[j], x0 + (j + 1))


def test_marginals_match_between_continuous_and_ou(lg_window, lg_backend):
    # small-sample version; the full 1e4-member check is in the acceptance suite
    times = (6, 12, 24)
    n = 2000
    a = run_plan(lg_window, ForecastPlan("CONTINUOUS", times, n_ens=n, master_seed=13), lg_backend).data
    b = run_plan(lg_window, ForecastPlan("CONTINUOUS_OU", times, n_ens=n, rho=math.log(10), master_seed=14), lg_backend).data
    w = lg_window.spec.area_weights
    for j in range(len(times)):
        # scalar summary per member: a weighted linear functional of the field
        sa = (a[:, j, 0] * w).mean(axis=(-2, -1))
        sb = (b[:, j, 0] * w).mean(axis=(-2, -1))
        assert abs(sa.mean() - sb.mean()) < 3 * math.sqrt((sa.var() + sb.var()) / n)
        # std of a Gaussian sample std is about std / sqrt(2n)
        assert abs(sa.std() - sb.std()) < 3 * math.sqrt((sa.var() + sb.var()) / (2 * n))
