"""Probability-flow ODE and its deterministic second-order Heun solver.

With sigma(s) = s the ODE reads dz/ds = (z - D(z; s)) / s. Integration
runs over the decreasing levels of a NoiseSchedule plus a terminal zero
level, where the corrector is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser.core import denoise_batch
from .edm import SAMPLING_SCHEDULE, NoiseSchedule, schedule_levels
from .grid import ConditioningWindow, GridState

INITIAL_SCALE_RULES = ("sigma", "sigma_squared")


class SamplerError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule = field(default_factory=lambda: SAMPLING_SCHEDULE)
    # "sigma" starts from s_0 * Z; "sigma_squared" is the s_0^2 * Z variant
    initial_scale_rule: str = "sigma"

    def __post_init__(self):
        if self.initial_scale_rule not in INITIAL_SCALE_RULES:
            raise ValueError(f"initial_scale_rule must be one of {INITIAL_SCALE_RULES}")

    def initial_scale(self) -> float:
        s0 = self.schedule.sigma_max
        return s0 if self.initial_scale_rule == "sigma" else s0 * s0


def flow_rhs(z, sigma, cond, lead_time, backend):
    """dz/dsigma = (z - D(z; sigma)) / sigma for a batch z of shape (B, V, H, W)."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("flow_rhs is undefined at sigma <= 0")
    return (z - denoise_batch(z, sigma, cond, lead_time, backend)) / sigma


def heun_sample_batch(noise, lead_time, cond, config: SamplerConfig, backend, return_trajectory=False):
    """Run the Heun solver for a batch of driving-noise tensors.

    noise: (B, V, H, W); cond: (B, Cc, H, W); lead_time: scalar or (B,).
    Returns z_N, or (z_N, [z_0, ..., z_N]) if ``return_trajectory``.
    """
    levels = schedule_levels(config.schedule)
    z = config.initial_scale() * np.asarray(noise, dtype=np.float64)
    traj = [z] if return_trajectory else None
    for i in range(len(levels) - 1):
        s, s_next = levels[i], levels[i + 1]
        d = flow_rhs(z, s, cond, lead_time, backend)
        z_next = z + (s_next - s) * d
        if s_next != 0:
            d2 = flow_rhs(z_next, s_next, cond, lead_time, backend)
            z_next = z + 0.5 * (s_next - s) * (d + d2)
        if not np.all(np.isfinite(z_next)):
            raise SamplerError(f"nonfinite state after solver level {i} (sigma {s:g} -> {s_next:g})")
        z = z_next
        if return_trajectory:
            traj.append(z)
    return (z, traj) if return_trajectory else z


def heun_sample(noise, lead_time: float, window: ConditioningWindow, config: SamplerConfig, backend) -> GridState:
    """Sample one state at ``lead_time`` hours from one driving-noise tensor."""
    noise = np.asarray(noise, dtype=np.float64)
    z = heun_sample_batch(noise[None], lead_time, window.stack()[None], config, backend)
    return GridState(window.spec, z[0], window.init_time + lead_time)
