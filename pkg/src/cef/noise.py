"""Driving noise: fixed, Ornstein-Uhlenbeck correlated, or independent.

All randomness comes from counter-based Philox streams keyed by
(master_seed, member, block, time index); the entry offset inside a tensor
is the stream counter. Nothing depends on generation order, so members and
times can be produced in any order or in parallel with identical bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MEMBER_BITS, _BLOCK_BITS, _INDEX_BITS = 24, 20, 20


class _Decorrelated:
    """Marker for the rho -> infinity limit (independent draw at every time)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INF"

    def __reduce__(self):
        return (_Decorrelated, ())


INF = _Decorrelated()


def parse_rho(value):
    """Config value -> rho: a nonnegative real or the token ``inf``."""
    if value is INF or (isinstance(value, str) and value.strip().lower() == "inf"):
        return INF
    if isinstance(value, bool):
        raise ValueError("rho must be a number or 'inf'")
    rho = float(value)
    if math.isinf(rho) and rho > 0:
        return INF
    if not rho >= 0 or math.isnan(rho):
        raise ValueError(f"rho must be >= 0 or 'inf', got {value!r}")
    return rho


def format_rho(rho) -> str | float:
    return "inf" if rho is INF else float(rho)


def stream_key(master_seed: int, member: int, index: int = 0, block: int = 0) -> np.ndarray:
    for name, val, bits in (("member", member, _MEMBER_BITS), ("block", block, _BLOCK_BITS), ("index", index, _INDEX_BITS)):
        if not 0 <= val < (1 << bits):
            raise ValueError(f"{name} {val} outside [0, 2**{bits})")
    if not 0 <= master_seed < (1 << 64):
        raise ValueError("master_seed must fit in 64 unsigned bits")
    packed = (member << (_BLOCK_BITS + _INDEX_BITS)) | (block << _INDEX_BITS) | index
    return np.array([master_seed, packed], dtype=np.uint64)


def standard_normal(shape, master_seed: int, member: int, index: int = 0, block: int = 0) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=stream_key(master_seed, member, index, block)))
    return gen.standard_normal(shape)


def sample_initial(member: int, shape, master_seed: int, block: int = 0) -> np.ndarray:
    """Driving noise for the first lead time of a member (time index 0)."""
    return standard_normal(shape, master_seed, member, 0, block)


def ou_step(z_prev, dt: float, rho, nu) -> np.ndarray:
    """Exact OU transition preserving a standard normal marginal."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if z_prev.shape != nu.shape:
        raise ValueError(f"shape mismatch {z_prev.shape} vs {nu.shape}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if rho is INF:
        return nu.copy()
    rho = parse_rho(rho)
    if rho == 0:
        return z_prev.copy()
    decay = math.exp(-rho * dt)
    return decay * z_prev + math.sqrt(-math.expm1(-2.0 * rho * dt)) * nu


@dataclass(frozen=True, eq=False)
class DrivingNoiseSequence:
    member: int
    times: np.ndarray
    fields: np.ndarray  # (len(times), *state_shape)
    rho: object

    def __len__(self):
        return len(self.times)


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a nonempty 1-D sequence")
    if np.any(np.diff(times) <= 0):
        raise ValueError(f"times must be strictly increasing, got {times}")
    return times


def generate_sequence(times, rho, member: int, master_seed: int, shape, block: int = 0) -> DrivingNoiseSequence:
    """OU-correlated sequence: z_0 from sample_initial, then one OU step per time."""
    times = _check_times(times)
    rho = parse_rho(rho)
    shape = tuple(shape)
    fields = np.empty((times.size,) + shape)
    fields[0] = sample_initial(member, shape, master_seed, block)
    for i in range(1, times.size):
        if rho == 0:
            fields[i] = fields[i - 1]
            continue
        nu = standard_normal(shape, master_seed, member, i, block)
        fields[i] = ou_step(fields[i - 1], times[i] - times[i - 1], rho, nu)
    return DrivingNoiseSequence(member, times, fields, rho)


def squared_exponential_factor(times, length_scale: float) -> np.ndarray:
    """Lower Cholesky factor of the SE kernel exp(-(dt)^2 / (2 l^2)) on ``times``."""
    times = _check_times(times)
    if not length_scale > 0:
        raise ValueError("length_scale must be positive")
    d = times[:, None] - times[None, :]
    k = np.exp(-0.5 * (d / length_scale) ** 2)
    jitter = 1e-10
    while True:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(times.size))
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > 1e-4:
                raise


def generate_gp_sequence(times, length_scale: float, member: int, master_seed: int, shape, block: int = 0) -> DrivingNoiseSequence:
    """Smoother alternative: stationary GP in time with a squared-exponential kernel.

    Uses the same per-index streams, so the first field equals
    :func:`sample_initial` up to the kernel jitter.
    """
    times = np.asarray(times, dtype=np.float64)
    chol = squared_exponential_factor(times, length_scale)
    shape = tuple(shape)
    nus = np.stack([standard_normal(shape, master_seed, member, i, block) for i in range(times.size)])
    fields = np.tensordot(chol, nus, axes=(1, 0))
    # renormalize so each time keeps an exactly unit marginal variance
    fields /= np.sqrt((chol**2).sum(axis=1)).reshape((-1,) + (1,) * len(shape))
    return DrivingNoiseSequence(member, times, fields, ("se", float(length_scale)))


def ensemble_noise(times, rho, members, master_seed: int, shape, block: int = 0) -> np.ndarray:
    """(len(members), len(times), *shape) stack of driving-noise sequences."""
    return np.stack([generate_sequence(times, rho, int(k), master_seed, shape, block).fields for k in members])
