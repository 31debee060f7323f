"""Noise-level schedules, preconditioning and training-noise sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

SIGMA_DATA = 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Karras-style schedule between ``sigma_max`` and ``sigma_min``.

    ``rho_sched`` is the shape exponent of the schedule (not the OU
    correlation parameter used for driving noise).
    """

    sigma_max: float = 80.0
    sigma_min: float = 0.03
    rho_sched: float = 7.0
    n_levels: int = 20

    def __post_init__(self):
        if not (self.sigma_max > self.sigma_min > 0):
            raise ValueError(f"need sigma_max > sigma_min > 0, got {self.sigma_max}, {self.sigma_min}")
        if not self.rho_sched > 0:
            raise ValueError("rho_sched must be positive")
        if int(self.n_levels) != self.n_levels or self.n_levels < 1:
            raise ValueError("n_levels must be an integer >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


SAMPLING_SCHEDULE = NoiseSchedule(80.0, 0.03, 7.0, 20)
TRAINING_SCHEDULE = NoiseSchedule(88.0, 0.02, 7.0, 20)


def _interp_rho(u, schedule: NoiseSchedule):
    inv = 1.0 / schedule.rho_sched
    hi = schedule.sigma_max**inv
    lo = schedule.sigma_min**inv
    return (hi + u * (lo - hi)) ** schedule.rho_sched


def schedule_levels(schedule: NoiseSchedule) -> np.ndarray:
    """Decreasing levels s_0 = sigma_max, ..., s_{N-1} = sigma_min, then s_N = 0.

    With a single level the sequence degenerates to [sigma_max, 0] and
    sigma_min is not used.
    """
    n = int(schedule.n_levels)
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    levels = _interp_rho(np.arange(n) / (n - 1), schedule)
    # pin endpoints: the power map is not exact in floating point
    levels[0] = schedule.sigma_max
    levels[-1] = schedule.sigma_min
    return np.append(levels, 0.0)


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def precondition(sigma: float, sigma_data: float = SIGMA_DATA) -> PreconditionCoeffs:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if not sigma_data > 0:
        raise ValueError("sigma_data must be positive")
    total = sigma * sigma + sigma_data * sigma_data
    root = math.sqrt(total)
    return PreconditionCoeffs(
        c_skip=sigma_data * sigma_data / total,
        c_out=sigma * sigma_data / root,
        c_in=1.0 / root,
        c_noise=0.25 * math.log(sigma) if sigma > 0 else -math.inf,
    )


def precondition_arrays(sigma, sigma_data: float = SIGMA_DATA):
    """Vectorized coefficients for an array of strictly positive sigmas."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma * sigma + sigma_data * sigma_data
    root = np.sqrt(total)
    return sigma_data * sigma_data / total, sigma * sigma_data / root, 1.0 / root, 0.25 * np.log(sigma)


def sample_training_sigma(u, train_schedule: NoiseSchedule = TRAINING_SCHEDULE):
    """Inverse-CDF map from u in [0, 1] to a training noise level."""
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(u_arr < 0) or np.any(u_arr > 1) or not np.all(np.isfinite(u_arr)):
        raise ValueError("u must lie in [0, 1]")
    sigma = _interp_rho(u_arr, train_schedule)
    return float(sigma) if sigma.ndim == 0 else sigma
