"""Exact denoisers for Gaussian data.

For X ~ N(mu, S) observed as X + eps with eps ~ N(0, sigma^2 I), the
minimizer of the denoising loss is the posterior mean
``mu + S (S + sigma^2 I)^{-1} (x - mu)``. Covariances are either diagonal
(per cell) or circulant on the doubly periodic grid, diagonalized by the
2-D FFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..edm import precondition_arrays


class SingularOperatorError(np.linalg.LinAlgError):
    pass


class DiagonalCovariance:
    def __init__(self, diag):
        d = np.asarray(diag, dtype=np.float64)
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("diagonal covariance must be finite and nonnegative")
        self.diag = d

    def apply(self, x):
        return self.diag * x

    def gain(self, x, sigma2):
        denom = self.diag + sigma2
        if np.any(denom <= 0):
            raise SingularOperatorError("S + sigma^2 I is singular")
        return self.diag / denom * x

    def sqrt_apply(self, x):
        return np.sqrt(self.diag) * x

    def dense(self):
        return np.diag(self.diag.ravel())


class CirculantCovariance:
    """Per-variable 2-D circulant covariance given by its FFT eigenvalues.

    ``spectrum`` has shape (V, H, W); it must be real, nonnegative and
    symmetric under k -> -k so that the operator is real and symmetric.
    """

    def __init__(self, spectrum, check: bool = True):
        s = np.asarray(spectrum, dtype=np.float64)
        if check:
            if s.ndim != 3:
                raise ValueError("spectrum must be (V, H, W)")
            if np.any(s < -1e-12 * max(1.0, np.abs(s).max())):
                raise ValueError("circulant spectrum must be nonnegative")
            flipped = np.roll(s[:, ::-1, ::-1], shift=(1, 1), axis=(1, 2))
            if not np.allclose(s, flipped, rtol=1e-12, atol=1e-14):
                raise ValueError("circulant spectrum must be symmetric under k -> -k")
        self.spectrum = np.maximum(s, 0.0)

    def _filter(self, x, mult):
        return np.fft.ifft2(mult * np.fft.fft2(x)).real

    def apply(self, x):
        return self._filter(x, self.spectrum)

    def gain(self, x, sigma2):
        denom = self.spectrum + sigma2
        if np.any(denom <= 0):
            raise SingularOperatorError("S + sigma^2 I is singular")
        return self._filter(x, self.spectrum / denom)

    def sqrt_apply(self, x):
        return self._filter(x, np.sqrt(self.spectrum))

    def dense(self):
        v, h, w = self.spectrum.shape
        n = v * h * w
        eye = np.eye(n).reshape(n, v, h, w)
        return self.apply(eye).reshape(n, n).T


@dataclass
class AnalyticGaussianModel:
    """Gaussian prior N(mean, cov) of one target state."""

    mean: np.ndarray
    cov: object


def analytic_posterior_mean(noisy, sigma: float, model: AnalyticGaussianModel) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("analytic posterior mean needs sigma > 0")
    noisy = np.asarray(noisy, dtype=np.float64)
    return model.mean + model.cov.gain(noisy - model.mean, sigma * sigma)


class AnalyticBackend:
    """Backend whose raw output makes the preconditioned denoiser exact.

    ``prior(window_states, lead_time)`` maps a (B, |offsets| * V, H, W)
    batch of conditioning states (static channels dropped) and one lead
    time to an AnalyticGaussianModel with (B, V, H, W) mean.
    """

    kind = "analytic"
    theta = np.zeros(0)

    def __init__(self, prior: Callable, n_vars: int, window_len: int, lead_time_scale: float = 240.0):
        self.prior = prior
        self.n_vars = n_vars
        self.window_len = window_len
        self.lead_time_scale = float(lead_time_scale)

    def posterior_mean(self, noisy, sigma, cond, lead_time):
        """Exact denoiser output for one (unbatched) sample."""
        model = self.prior(cond[None, : self.n_vars * self.window_len], lead_time)
        return analytic_posterior_mean(noisy, sigma, AnalyticGaussianModel(model.mean[0], model.cov))

    def raw_apply(self, x, c_noise, t_norm, cond):
        x = np.asarray(x, dtype=np.float64)
        b = x.shape[0]
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        t_norm = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (b,))
        sigma = np.exp(4.0 * c_noise)
        c_skip, c_out, c_in, _ = precondition_arrays(sigma)
        out = np.empty_like(x)
        nw = self.n_vars * self.window_len
        for t in np.unique(t_norm):
            idx = np.flatnonzero(t_norm == t)
            model = self.prior(cond[idx, :nw], t * self.lead_time_scale)
            col = (slice(None), None, None, None)
            noisy = x[idx] / c_in[idx][col]
            d = model.mean + model.cov.gain(noisy - model.mean, (sigma[idx] ** 2)[col])
            out[idx] = (d - c_skip[idx][col] * noisy) / c_out[idx][col]
        return out

    def forward(self, x, c_noise, t_norm, cond, theta=None, train=False, rng=None, keep=False):
        return self.raw_apply(x, c_noise, t_norm, cond), None

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class ZeroBackend:
    """F == 0; isolates the skip path of the preconditioned denoiser."""

    kind = "zero"
    theta = np.zeros(0)
    lead_time_scale = 240.0

    def raw_apply(self, x, c_noise, t_norm, cond):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def descriptor(self) -> dict:
        return {"kind": self.kind}
