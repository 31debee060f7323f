"""Finite-difference gradient checks and the quick invariant self-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..denoiser import Architecture, ConvResNet
from ..edm import precondition, sample_training_sigma
from ..grid import make_grid_spec
from ..train import denoising_loss


@dataclass
class Probe:
    target: str  # "network" or "loss"
    draw: int
    coord: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / (abs(self.numeric) + 1e-8)


def small_problem(seed: int, height=3, width=5, n_vars=2, batch=3, width_ch=8, dtype=np.float64):
    rng = np.random.default_rng(seed)
    spec = make_grid_spec(height, width, [f"var{j}" for j in range(n_vars)])
    arch = Architecture(n_vars, 2 * n_vars + 1, width=width_ch, blocks=2, dropout=0.0)
    net = ConvResNet(arch, seed=seed, dtype=dtype)
    # random theta with biases switched on so every path is exercised
    net.theta = net.init_theta(seed) + 0.1 * rng.standard_normal(net.size)
    cond = np.concatenate([rng.standard_normal((batch, 2 * n_vars, height, width)), np.broadcast_to(spec.static_fields, (batch, 1, height, width))], axis=1)
    target = rng.standard_normal((batch, n_vars, height, width))
    sigma = sample_training_sigma(rng.random(batch))
    eps = rng.standard_normal(target.shape) * sigma[:, None, None, None]
    leads = rng.choice([6.0, 12.0, 18.0], size=batch)
    scales = rng.uniform(0.5, 2.0, size=(batch, n_vars))
    return spec, net, cond, target, sigma, eps, leads, scales, rng


def _central(f, theta, i, h):
    tp, tm = theta.copy(), theta.copy()
    tp[i] += h
    tm[i] -= h
    return (f(tp) - f(tm)) / (2 * h)


def gradcheck(draws: int = 10, coords: int = 10, h: float = 1e-5, seed: int = 0, dtype=np.float64) -> list[Probe]:
    """Compare analytic and central-difference gradients for the raw network
    (random linear functional of its output) and for the denoising loss."""
    probes = []
    for d in range(draws):
        spec, net, cond, target, sigma, eps, leads, scales, rng = small_problem(seed + d, dtype=dtype)
        c = [precondition(s) for s in sigma]
        x = np.stack([ci.c_in for ci in c])[:, None, None, None] * (target + eps)
        c_noise = np.array([ci.c_noise for ci in c])
        t_norm = leads / net.arch.lead_time_scale
        dout = rng.standard_normal(target.shape)

        def net_fn(theta):
            return float(np.sum(dout * net.forward(x, c_noise, t_norm, cond, theta=theta)[0]))

        _, cache = net.forward(x, c_noise, t_norm, cond, keep=True)
        g_net, _ = net.backward(cache, dout)

        def loss_fn(theta):
            saved = net.theta
            net.theta = theta
            try:
                return denoising_loss(net, cond, target, leads, sigma, eps, spec.area_weights, scales, need_grad=False)[0]
            finally:
                net.theta = saved

        _, g_loss, _ = denoising_loss(net, cond, target, leads, sigma, eps, spec.area_weights, scales)
        for i in rng.choice(net.size, size=coords, replace=False):
            probes.append(Probe("network", d, int(i), float(g_net[i]), _central(net_fn, net.theta, i, h)))
            probes.append(Probe("loss", d, int(i), float(g_loss[i]), _central(loss_fn, net.theta, i, h)))
    return probes


def input_gradcheck(seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of d(sum(dout * F))/d(inputs) over random entries."""
    spec, net, cond, target, sigma, eps, leads, scales, rng = small_problem(seed)
    x = target + eps
    c_noise = 0.25 * np.log(sigma)
    t_norm = leads / net.arch.lead_time_scale
    dout = rng.standard_normal(target.shape)
    _, cache = net.forward(x, c_noise, t_norm, cond, keep=True)
    _, g = net.backward(cache, dout)
    worst = 0.0

    def f(**kw):
        args = dict(x=x, c_noise=c_noise, t_norm=t_norm, cond=cond) | kw
        return float(np.sum(dout * net.forward(args["x"], args["c_noise"], args["t_norm"], args["cond"])[0]))

    for name, arr in (("x", x), ("cond", cond), ("c_noise", c_noise), ("t_norm", t_norm)):
        flat = arr.reshape(-1)
        for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            p, m = flat.copy(), flat.copy()
            p[j] += h
            m[j] -= h
            fd = (f(**{name: p.reshape(arr.shape)}) - f(**{name: m.reshape(arr.shape)})) / (2 * h)
            an = g[name].reshape(-1)[j]
            worst = max(worst, abs(an - fd) / (abs(fd) + 1e-8))
    return worst


def selftest(verbose=print) -> bool:
    """Fast invariant checks across modules; returns True when all pass."""
    from ..denoiser import ZeroBackend, denoise
    from ..edm import SAMPLING_SCHEDULE, schedule_levels
    from ..forecast import ForecastPlan, ar_baseline, run_plan
    from ..grid import ConditioningWindow
    from ..metrics import crps, rmse
    from ..noise import generate_sequence
    from .systems import ToySystemSpec, build_system

    results = []

    def check(name, ok):
        results.append(bool(ok))
        verbose(f"{'PASS' if ok else 'FAIL'} {name}")

    lv = schedule_levels(SAMPLING_SCHEDULE)
    check("schedule endpoints", lv[0] == 80.0 and lv[-2] == 0.03 and lv[-1] == 0.0)
    ok = True
    for s in np.logspace(-3, 3, 60):
        c = precondition(s)
        ok &= abs(c.c_skip**2 * (s * s + 1) + c.c_out**2 - 1) <= 1e-12 and abs(c.c_in**2 * (s * s + 1) - 1) <= 1e-12
    check("preconditioning identities", ok)
    seq = generate_sequence([1, 2, 3], 0.0, 0, 1, (4,))
    check("rho = 0 noise is constant", all(np.array_equal(seq.fields[0], f) for f in seq.fields))

    system = build_system(ToySystemSpec(height=3, width=6))
    spec = make_grid_spec(3, 6)
    x = system.simulate(8, np.random.default_rng(0))
    window = ConditioningWindow.from_array(spec, x[[8, 2]], (0.0, -6.0))
    check("denoise at sigma = 0 is the identity", np.array_equal(denoise(x[0], 0.0, window, 6.0, ZeroBackend()), x[0]))
    backend = system.analytic_backend(spec, 2, 240.0)
    a = run_plan(window, ForecastPlan("CONTINUOUS", (6, 12), n_ens=3, master_seed=5), backend)
    b = run_plan(window, ForecastPlan("CONTINUOUS_OU", (6, 12), n_ens=3, master_seed=5, rho=0), backend)
    c = run_plan(window, ForecastPlan("ARCI", (6, 12), steps=1, n_ens=3, master_seed=5), backend)
    check("CONTINUOUS_OU(rho=0) == CONTINUOUS", np.array_equal(a.data, b.data))
    check("ARCI(J=1) == CONTINUOUS", np.array_equal(a.data, c.data))
    d = run_plan(window, ForecastPlan("ARCI", (6,), steps=2, n_ens=3, master_seed=5), backend)
    e = ar_baseline(window, 6.0, 2, 3, backend, 5)
    check("ARCI(N=1) == AR baseline", np.array_equal(d.data, e.data))

    rng = np.random.default_rng(0)
    f = rng.standard_normal((3, 4, 2, 1, 3, 6))
    y = rng.standard_normal((3, 2, 1, 3, 6))
    check("CRPS >= 0", np.all(crps(f, y, spec.area_weights) >= 0))
    check("CRPS(n=1) == weighted MAE", np.allclose(crps(f[:, :1], y, spec.area_weights), (np.abs(f[:, 0] - y) * spec.area_weights).mean(axis=(-2, -1)).mean(axis=0), rtol=1e-14))
    check("RMSE of ensemble mean <= member RMSE", np.all(rmse(f, y, spec.area_weights) <= np.mean([rmse(f[:, k : k + 1], y, spec.area_weights) for k in range(4)], axis=0) + 1e-12))
    probes = gradcheck(draws=2, coords=5)
    check("gradients match finite differences", max(p.rel_error for p in probes) < 1e-5)
    return all(results)


def max_rel_error(probes) -> float:
    return max((p.rel_error for p in probes), default=math.nan)
