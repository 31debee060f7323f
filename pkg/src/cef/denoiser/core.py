"""Preconditioned denoiser D = c_skip x + c_out F(c_in x; c_noise, cond, t)."""

from __future__ import annotations

import numpy as np

from ..edm import SIGMA_DATA, precondition_arrays
from ..grid import ConditioningWindow, GridError


def lead_time_scale(backend) -> float:
    arch = getattr(backend, "arch", None)
    return float(arch.lead_time_scale if arch is not None else backend.lead_time_scale)


def denoise_batch(noisy, sigma, cond, lead_time, backend):
    """Batched denoiser.

    noisy: (B, V, H, W); sigma: scalar or (B,) all > 0 or all == 0;
    cond: (B, Cc, H, W) window stack plus static fields; lead_time: hours,
    scalar or (B,).
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    b = noisy.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    if cond.shape[0] != b or cond.shape[2:] != noisy.shape[2:]:
        raise GridError(f"conditioning shape {cond.shape} inconsistent with target {noisy.shape}")
    if not (np.all(np.isfinite(noisy)) and np.all(np.isfinite(cond))):
        raise GridError("denoiser inputs must be finite")
    if np.all(sigma == 0):
        return noisy.copy()
    if np.any(sigma == 0):
        raise ValueError("mixed zero and nonzero sigma in one batch")
    t = np.broadcast_to(np.asarray(lead_time, dtype=np.float64), (b,))
    c_skip, c_out, c_in, c_noise = precondition_arrays(sigma, SIGMA_DATA)
    col = (slice(None), None, None, None)
    f = backend.raw_apply(c_in[col] * noisy, c_noise, t / lead_time_scale(backend), cond)
    if f.shape != noisy.shape:
        raise GridError(f"backend output {f.shape} != target shape {noisy.shape}")
    return c_skip[col] * noisy + c_out[col] * f


def denoise(noisy, sigma: float, window: ConditioningWindow, lead_time: float, backend) -> np.ndarray:
    """Single-state denoiser. sigma == 0 returns the input unchanged."""
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.shape != window.spec.state_shape:
        raise GridError(f"noisy state shape {noisy.shape} != {window.spec.state_shape}")
    if sigma == 0:
        return noisy.copy()
    return denoise_batch(noisy[None], sigma, window.stack()[None], lead_time, backend)[0]
