"""Ensemble forecasting algorithms.

* CONTINUOUS: one driving-noise draw per member reused at every lead time.
* CONTINUOUS_OU: per-member OU-correlated driving noise across lead times.
* ARCI: autoregressive blocks whose interiors are filled by one of the above.
* AR_BASELINE: single-step autoregressive rollout with fresh noise per step.
* DETERMINISTIC: rollout of an MSE-trained regressor.

Every sample is an independent Heun solve, so work is split into fixed
chunks that may run on a thread pool (``CEF_THREADS``) without changing a
single bit of the result.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import ConditioningWindow, EnsembleForecast, GridError
from .noise import format_rho, generate_gp_sequence, generate_sequence, parse_rho, sample_initial
from .sampler import SamplerConfig, heun_sample_batch

ALGORITHMS = ("CONTINUOUS", "CONTINUOUS_OU", "ARCI", "AR_BASELINE", "DETERMINISTIC")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CEF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ForecastPlan:
    """What to forecast.

    ``times`` are the interpolation lead times of one block (hours). For
    mixed-resolution ARCI plans pass ``block_times``, one list per block.
    ``inner`` selects the algorithm used inside ARCI blocks.
    """

    algorithm: str = "CONTINUOUS"
    times: tuple = (6.0, 12.0, 18.0, 24.0)
    steps: int = 1
    n_ens: int = 8
    rho: object = 0.0
    master_seed: int = 0
    inner: str = "CONTINUOUS"
    block_times: tuple | None = None
    gp_length_scale: float | None = None
    # hours per unit of time in the OU / GP noise (rho is per unit)
    noise_time_unit: float = 24.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.inner not in ("CONTINUOUS", "CONTINUOUS_OU"):
            raise ValueError("ARCI inner algorithm must be CONTINUOUS or CONTINUOUS_OU")
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "rho", parse_rho(self.rho))
        if self.block_times is not None:
            bt = tuple(tuple(float(t) for t in b) for b in self.block_times)
            object.__setattr__(self, "block_times", bt)
            object.__setattr__(self, "steps", len(bt))
        for b in self.blocks():
            if not b or b[0] <= 0 or any(y <= x for x, y in zip(b, b[1:])):
                raise ValueError(f"block lead times must be positive and increasing, got {b}")
        if not self.noise_time_unit > 0:
            raise ValueError("noise_time_unit must be positive")
        if self.steps < 1 or self.n_ens < 1:
            raise ValueError("steps and n_ens must be >= 1")

    def blocks(self) -> list[tuple[float, ...]]:
        if self.block_times is not None:
            return list(self.block_times)
        return [self.times] * self.steps

    def absolute_lead_times(self) -> np.ndarray:
        out, base = [], 0.0
        for b in self.blocks():
            out.extend(base + t for t in b)
            base += b[-1]
        return np.array(out)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "times": list(self.times),
            "steps": self.steps,
            "n_ens": self.n_ens,
            "rho": format_rho(self.rho),
            "master_seed": self.master_seed,
            "inner": self.inner,
            "block_times": [list(b) for b in self.block_times] if self.block_times else None,
            "gp_length_scale": self.gp_length_scale,
            "noise_time_unit": self.noise_time_unit,
        }


# -- batched sampling -------------------------------------------------------


def sample_many(noise, lead_times, cond, config: SamplerConfig, backend, chunk: int = 256, workers: int | None = None):
    """Heun-sample every row of ``noise`` (B, V, H, W) in fixed-size chunks."""
    noise = np.asarray(noise, dtype=np.float64)
    b = noise.shape[0]
    lead_times = np.broadcast_to(np.asarray(lead_times, dtype=np.float64), (b,))
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == noise.ndim - 1:
        cond = cond[None]
    if cond.shape[0] != b:
        cond = np.broadcast_to(cond, (b,) + cond.shape[1:])
    out = np.empty_like(noise)
    spans = [(i, min(i + chunk, b)) for i in range(0, b, chunk)]

    def run(span):
        lo, hi = span
        out[lo:hi] = heun_sample_batch(noise[lo:hi], lead_times[lo:hi], cond[lo:hi], config, backend)

    workers = worker_count() if workers is None else workers
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return out


def _block_noise(plan: ForecastPlan, times, shape, block: int, inner: str) -> np.ndarray:
    """(n_ens, len(times), *shape) driving noise for one block."""
    n = len(times)
    times = np.asarray(times, dtype=np.float64) / plan.noise_time_unit
    noise = np.empty((plan.n_ens, n) + tuple(shape))
    for k in range(plan.n_ens):
        if inner == "CONTINUOUS":
            noise[k] = sample_initial(k, shape, plan.master_seed, block)
        elif plan.gp_length_scale is not None:
            noise[k] = generate_gp_sequence(times, plan.gp_length_scale, k, plan.master_seed, shape, block).fields
        else:
            noise[k] = generate_sequence(times, plan.rho, k, plan.master_seed, shape, block).fields
    return noise


def _provenance(plan: ForecastPlan, config: SamplerConfig, backend, lead_times) -> dict:
    prov = {
        "algorithm": plan.algorithm,
        "inner": plan.inner if plan.algorithm == "ARCI" else None,
        "master_seed": plan.master_seed,
        "rho": format_rho(plan.rho),
        "schedule_hash": config.schedule.digest(),
        "initial_scale_rule": config.initial_scale_rule,
        "backend": backend.descriptor().get("kind") if hasattr(backend, "descriptor") else type(backend).__name__,
    }
    trained = getattr(backend, "trained_lead_times", None)
    if trained:
        trained = np.asarray(trained, dtype=np.float64)
        # ARCI blocks only ever query in-block lead times
        queried = np.unique(np.concatenate([np.asarray(b) for b in plan.blocks()])) if plan.algorithm in ("ARCI", "AR_BASELINE") else lead_times
        prov["untrained_leads"] = [float(t) for t in queried if not np.any(np.isclose(trained, t))]
        prov["extrapolated_leads"] = [float(t) for t in queried if t < trained.min() or t > trained.max()]
    return prov


def _run_block(cond, times, plan, config, backend, block, inner, state_shape):
    """Sample one block for all members.

    cond: (Cc, H, W) shared window or (n_ens, Cc, H, W) per-member windows.
    Returns (n_ens, len(times), V, H, W).
    """
    cond = np.asarray(cond, dtype=np.float64)
    noise = _block_noise(plan, times, state_shape, block, inner)
    n, nt = plan.n_ens, len(times)
    flat_noise = noise.reshape((n * nt,) + tuple(state_shape))
    flat_t = np.tile(np.asarray(times, dtype=np.float64), n)
    if cond.ndim == 4:
        flat_cond = np.repeat(cond, nt, axis=0)
    else:
        flat_cond = np.broadcast_to(cond, (n * nt,) + cond.shape)
    out = sample_many(flat_noise, flat_t, flat_cond, config, backend)
    return out.reshape((n, nt) + tuple(state_shape))


def continuous_forecast(window: ConditioningWindow, plan: ForecastPlan, backend, config: SamplerConfig = SamplerConfig()) -> EnsembleForecast:
    if plan.algorithm not in ("CONTINUOUS", "ARCI"):
        raise ValueError("continuous_forecast needs a CONTINUOUS plan")
    times = np.asarray(plan.times)
    data = _run_block(window.stack(), times, plan, config, backend, 0, "CONTINUOUS", window.spec.state_shape)
    prov = _provenance(plan, config, backend, times)
    return EnsembleForecast(window.spec, times, data, prov)


def extended_continuous_forecast(window: ConditioningWindow, plan: ForecastPlan, backend, config: SamplerConfig = SamplerConfig()) -> EnsembleForecast:
    if plan.algorithm not in ("CONTINUOUS_OU", "ARCI"):
        raise ValueError("extended_continuous_forecast needs a CONTINUOUS_OU plan")
    times = np.asarray(plan.times)
    data = _run_block(window.stack(), times, plan, config, backend, 0, "CONTINUOUS_OU", window.spec.state_shape)
    prov = _provenance(plan, config, backend, times)
    return EnsembleForecast(window.spec, times, data, prov)


def _window_lookup(window: ConditioningWindow, gen_times, gen_states, boundaries):
    """Per-member conditioning stacks at the latest of ``boundaries``.

    gen_states: (n_ens, len(gen_times), V, H, W) member trajectories;
    ``boundaries`` lists every block boundary so far, starting at 0. An
    offset whose state was neither generated nor part of the initial window
    falls back to the boundary state as many boundaries back as the
    offset's position in the window.
    """
    spec = window.spec
    init = {float(o): s.values for o, s in zip(window.offsets, window.states)}
    n = gen_states.shape[0]
    boundary = boundaries[-1]

    def state_at(tau):
        hit = np.flatnonzero(np.isclose(gen_times, tau, rtol=0, atol=1e-9))
        if hit.size:
            return gen_states[:, hit[0]]
        key = next((o for o in init if abs(tau - o) < 1e-9), None)
        return None if key is None else np.broadcast_to(init[key], (n,) + spec.state_shape)

    parts = []
    for k, off in enumerate(window.offsets):
        found = state_at(boundary + off)
        if found is None and k < len(boundaries):
            found = state_at(boundaries[-1 - k])
        if found is None:
            raise GridError(
                f"window offset {off} at boundary {boundary}h needs the state at {boundary + off}h, "
                "which is neither generated, part of the initial window, nor covered by an earlier boundary"
            )
        parts.append(found)
    static = np.broadcast_to(spec.static_fields, (n,) + spec.static_fields.shape)
    return np.concatenate(parts + [static], axis=1)


def _rollout(window, plan, backend, config, inner):
    spec = window.spec
    blocks = plan.blocks()
    lead_times = plan.absolute_lead_times()
    n = plan.n_ens
    states = np.empty((n, lead_times.size) + spec.state_shape)
    base, pos = 0.0, 0
    boundaries = [0.0]
    cond = window.stack()
    for j, times in enumerate(blocks):
        if j > 0:
            boundaries.append(base)
            cond = _window_lookup(window, lead_times[:pos], states[:, :pos], boundaries)
        out = _run_block(cond, np.asarray(times), plan, config, backend, j, inner, spec.state_shape)
        states[:, pos : pos + len(times)] = out
        pos += len(times)
        base += times[-1]
    return lead_times, states


def arci_forecast(window: ConditioningWindow, plan: ForecastPlan, backend, config: SamplerConfig = SamplerConfig()) -> EnsembleForecast:
    """Autoregressive blocks, each interpolated by a continuous forecast.

    Member k of block j+1 conditions on member k's own states from earlier
    blocks. Each block draws fresh driving noise.
    """
    if plan.algorithm != "ARCI":
        raise ValueError("arci_forecast needs an ARCI plan")
    lead_times, states = _rollout(window, plan, backend, config, plan.inner)
    prov = _provenance(plan, config, backend, lead_times)
    return EnsembleForecast(window.spec, lead_times, states, prov)


def ar_baseline(window: ConditioningWindow, delta: float, steps: int, n_ens: int, backend, seed: int, config: SamplerConfig = SamplerConfig()) -> EnsembleForecast:
    """Single-step autoregressive ensemble rollout with fresh noise per step."""
    plan = ForecastPlan("AR_BASELINE", times=(delta,), steps=steps, n_ens=n_ens, master_seed=seed)
    lead_times, states = _rollout(window, plan, backend, config, "CONTINUOUS")
    return EnsembleForecast(window.spec, lead_times, states, _provenance(plan, config, backend, lead_times))


def run_plan(window: ConditioningWindow, plan: ForecastPlan, backend, config: SamplerConfig = SamplerConfig()) -> EnsembleForecast:
    if plan.algorithm == "CONTINUOUS":
        return continuous_forecast(window, plan, backend, config)
    if plan.algorithm == "CONTINUOUS_OU":
        return extended_continuous_forecast(window, plan, backend, config)
    if plan.algorithm == "ARCI":
        return arci_forecast(window, plan, backend, config)
    if plan.algorithm == "AR_BASELINE":
        if len(plan.times) != 1:
            raise ValueError("AR_BASELINE plans take a single step length in times")
        return ar_baseline(window, plan.times[0], plan.steps, plan.n_ens, backend, plan.master_seed, config)
    raise ValueError("DETERMINISTIC plans are run with deterministic_forecast")


# -- deterministic baseline ---------------------------------------------------


def deterministic_forecast(window: ConditioningWindow, delta: float, steps: int, mse_model) -> np.ndarray:
    """Roll out ``mse_model.predict(cond_batch)`` for ``steps`` steps of ``delta`` hours.

    Returns a (steps, V, H, W) trajectory.
    """
    spec = window.spec
    traj = np.empty((steps,) + spec.state_shape)
    times = delta * np.arange(1, steps + 1)
    cond = window.stack()[None]
    for j in range(steps):
        if j > 0:
            cond = _window_lookup(window, times[:j], traj[None, :j], [i * delta for i in range(j + 1)])
        traj[j] = mse_model.predict(cond)[0]
    return traj
