import logging
import math

import numpy as np
import pytest

from cef.denoiser import Architecture, ConvResNet
from cef.edm import precondition
from cef.grid import make_grid_spec
from cef.train import (
    AdamW,
    LeadTimeScale,
    MSEForecaster,
    PairSet,
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    compute_leadtime_scales,
    denoising_loss,
    fixed_batch,
    learning_rate,
    sigma_weight,
    train,
)


@pytest.fixture(scope="module")
def lg_pairs(linear_gauss):
    spec = make_grid_spec(4, 8)
    series = linear_gauss.simulate(600, np.random.default_rng(3))
    return PairSet(series, spec, (0, -6), (6, 12), np.arange(6, 600 - 12))


def tiny_net(seed=0):
    return ConvResNet(Architecture(1, 3, width=8, blocks=1, dropout=0.0), seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lead_times=(0,))
    with pytest.raises(ValueError):
        TrainConfig(sigma_weighting="uniform")
    assert TrainConfig(epochs=2, batch_size=10).total_steps(25) == 6
    assert TrainConfig(max_steps=4).total_steps(10**6) == 4


def test_learning_rate_schedule():
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, final_lr_fraction=1e-2)
    assert learning_rate(0, 110, cfg) == pytest.approx(1e-4)
    assert learning_rate(9, 110, cfg) == pytest.approx(1e-3)
    assert learning_rate(10, 110, cfg) == pytest.approx(1e-3)
    assert learning_rate(60, 110, cfg) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert learning_rate(110, 110, cfg) == pytest.approx(1e-5)
    lrs = [learning_rate(s, 110, cfg) for s in range(10, 111)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adamw_first_step():
    opt = AdamW(3, weight_decay=0.1)
    theta = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 0.0])
    new = opt.step(theta, g, 0.01)
    # bias-corrected first step moves by lr * sign(g) plus decoupled decay
    expect = theta - 0.01 * (g / (np.abs(g) + 1e-8) + 0.1 * theta)
    assert np.allclose(new, expect, rtol=1e-12)


def test_sigma_weights():
    assert sigma_weight(2.0) == 0.25
    assert sigma_weight(2.0, "edm") == pytest.approx(5 / 4)
    # edm weighting makes lambda * c_out^2 == 1
    for s in (0.02, 1.0, 88.0):
        assert sigma_weight(s, "edm") * precondition(s).c_out ** 2 == pytest.approx(1.0)


def test_pairs_and_scales(lg_pairs, caplog):
    cond, target, leads = lg_pairs.sample(np.random.default_rng(0), 5)
    assert cond.shape == (5, 3, 4, 8) and target.shape == (5, 1, 4, 8)
    i = lg_pairs.indices[0]
    assert np.array_equal(lg_pairs.cond([i])[0, 1], lg_pairs.series[i - 6, 0])
    scales = compute_leadtime_scales(lg_pairs)
    assert scales.table.shape == (2, 1) and scales.table[1, 0] > scales.table[0, 0]
    assert compute_leadtime_scales(lg_pairs, mode="unit").table.tolist() == [[1.0], [1.0]]
    back = LeadTimeScale.from_dict(scales.to_dict())
    assert back.lead_times == scales.lead_times and np.array_equal(back.table, scales.table)
    with pytest.raises(ValueError, match="7"):
        scales.lookup([6.0, 7.0])
    flat = PairSet(np.zeros((40, 1, 4, 8)), lg_pairs.spec, (0,), (6,), np.arange(0, 30))
    with caplog.at_level(logging.WARNING):
        floored = compute_leadtime_scales(flat)
    assert floored.table[0, 0] == 1e-6 and "floored" in caplog.text


def test_white_noise_scale_is_sqrt2_std():
    spec = make_grid_spec(4, 8)
    series = 2.0 * np.random.default_rng(4).standard_normal((2000, 1, 4, 8))
    pairs = PairSet(series, spec, (0,), (1, 5), np.arange(0, 1990))
    table = compute_leadtime_scales(pairs).table[:, 0]
    assert np.allclose(table, 2.0 * math.sqrt(2), rtol=0.02)


def test_linear_gauss_scale_matches_closed_form(linear_gauss):
    # Var(X(t) - X(0)) per cell = 2 * mean_k S(k) (1 - Re exp(lambda_k t)) for a stationary start
    spec = make_grid_spec(4, 8)
    series = linear_gauss.simulate(20000, np.random.default_rng(0))
    pairs = PairSet(series, spec, (0,), (6, 24), np.arange(0, 20000 - 24))
    table = compute_leadtime_scales(pairs).table[:, 0]
    exact = [math.sqrt(2 * np.mean(linear_gauss.stationary * (1 - np.exp(linear_gauss.eig * t).real))) for t in (6, 24)]
    assert np.allclose(table, exact, rtol=0.02)


def test_pairset_rejects_out_of_range(lg_pairs):
    with pytest.raises(ValueError):
        PairSet(lg_pairs.series, lg_pairs.spec, (0, -6), (6,), np.arange(0, 10))
    with pytest.raises(ValueError):
        PairSet(lg_pairs.series, lg_pairs.spec, (0,), (6,), np.array([], dtype=int))


def test_oracle_loss_matches_posterior_variance(linear_gauss, lg_backend):
    # with the exact denoiser, E loss at fixed sigma = (1/sigma^2) * mean posterior variance
    spec = make_grid_spec(4, 8)
    rng = np.random.default_rng(5)
    b, sigma, lead = 4000, 1.3, 12.0
    cond = np.concatenate([rng.standard_normal((b, 2, 4, 8)), np.broadcast_to(spec.static_fields, (b, 1, 4, 8))], axis=1)
    model = linear_gauss.prior(spec, 2)(cond, lead)
    target = model.mean + model.cov.sqrt_apply(rng.standard_normal((b, 1, 4, 8)))
    eps = sigma * rng.standard_normal(target.shape)
    loss, _, per_ex = denoising_loss(lg_backend, cond, target, np.full(b, lead), np.full(b, sigma), eps, spec.area_weights, np.ones((b, 1)), need_grad=False)
    p = linear_gauss.transition_spectrum(lead) / spec.stds[:, None, None] ** 2
    post = (p * sigma**2 / (p + sigma**2)).mean()
    expect = post / sigma**2 * spec.area_weights.mean()
    assert loss == pytest.approx(expect, abs=4 * per_ex.std() / math.sqrt(b))


def held_out_loss(pairs, cfg, net):
    val = fixed_batch(pairs, cfg, 512, 99)
    return batch_loss(net, cfg, compute_leadtime_scales(pairs, cfg.lead_times), pairs.spec.area_weights, *val, need_grad=False)[0]


def test_training_reduces_loss_and_is_deterministic(lg_pairs):
    cfg = TrainConfig(peak_lr=3e-3, warmup_steps=5, batch_size=16, max_steps=150, dropout=0.0, lead_times=(6, 12), seed=2)
    a, b = tiny_net(), tiny_net()
    before = held_out_loss(lg_pairs, cfg, a)
    ra = train(lg_pairs, cfg, a, log_every=0)
    rb = train(lg_pairs, cfg, b, log_every=0)
    assert np.array_equal(ra.theta, rb.theta) and np.array_equal(ra.losses, rb.losses)
    assert held_out_loss(lg_pairs, cfg, a) < 0.85 * before
    assert np.array_equal(a.theta, ra.theta) and ra.steps == 150


def test_dropout_training_runs(lg_pairs):
    cfg = TrainConfig(warmup_steps=1, batch_size=4, max_steps=3, dropout=0.2, lead_times=(6,))
    net = ConvResNet(Architecture(1, 3, width=8, blocks=1, dropout=0.2))
    assert np.all(np.isfinite(train(lg_pairs, cfg, net, log_every=0).losses))


def test_validation_curve(lg_pairs):
    cfg = TrainConfig(warmup_steps=2, batch_size=8, max_steps=10, dropout=0.0, lead_times=(6,))
    res = train(lg_pairs, cfg, tiny_net(), validation=fixed_batch(lg_pairs, cfg, 32, 1), validate_every=4, log_every=0)
    assert [s for s, _ in res.validation] == [4, 8, 10]


def test_warmup_longer_than_run_is_rejected(lg_pairs):
    with pytest.raises(ValueError, match="warmup"):
        train(lg_pairs, TrainConfig(warmup_steps=50, max_steps=10, lead_times=(6,)), tiny_net(), log_every=0)
    with pytest.raises(ValueError, match="pair set"):
        train(lg_pairs, TrainConfig(max_steps=10, warmup_steps=1, lead_times=(24,)), tiny_net(), log_every=0)


def test_divergence_is_detected(lg_pairs):
    cfg = TrainConfig(peak_lr=50.0, warmup_steps=0, batch_size=8, max_steps=200, dropout=0.0, weight_decay=0.0, lead_times=(6,), objective="mse")
    with pytest.raises(TrainingDiverged):
        train(lg_pairs, cfg, tiny_net(), log_every=0)


def test_mse_objective_fits_regression(lg_pairs):
    cfg = TrainConfig(peak_lr=3e-3, warmup_steps=5, batch_size=16, max_steps=80, dropout=0.0, lead_times=(6,), objective="mse", seed=1)
    net = tiny_net()
    before = held_out_loss(lg_pairs, cfg, net)
    train(lg_pairs, cfg, net, log_every=0)
    assert held_out_loss(lg_pairs, cfg, net) < 0.7 * before
    model = MSEForecaster(net, 6.0)
    cond = lg_pairs.cond(lg_pairs.indices[:3])
    assert model.predict(cond).shape == (3, 1, 4, 8)
