"""Synthetic spatio-temporal systems with known statistics.

LINEAR_GAUSS
    Stochastic advection-diffusion with damping on a doubly periodic grid,
    driven by Gaussian forcing. Each 2-D Fourier mode is an independent
    complex OU process, so p(X(t) | X(0)) is Gaussian with a circulant
    covariance and is sampled exactly (no time stepping).
LORENZ96_S
    One Lorenz-96 ring per grid row (sites along the periodic W axis) with
    additive white-noise forcing, integrated with RK4 plus an Euler-Maruyama
    noise increment.

Times are in hours.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..denoiser.analytic import AnalyticBackend, AnalyticGaussianModel, CirculantCovariance
from ..grid import GridSpec

KINDS = ("LINEAR_GAUSS", "LORENZ96_S")


@dataclass(frozen=True)
class ToySystemSpec:
    kind: str = "LINEAR_GAUSS"
    height: int = 16
    width: int = 32
    n_vars: int = 1
    # LINEAR_GAUSS: cells / hour, cells^2 / hour, 1 / hour, cells.
    # The *_y terms couple rows; at 0 the rows are independent copies.
    advection: float = 0.1
    diffusivity: float = 0.05
    damping: float = 0.05
    corr_length: float = 2.0
    diffusivity_y: float = 0.0
    corr_length_y: float = 0.0
    # LORENZ96_S
    lorenz_forcing: float = 8.0
    noise_amplitude: float = 1.0
    hours_per_mtu: float = 120.0
    dt_hours: float = 0.25
    base_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if self.height < 1 or self.width < 4 or self.n_vars < 1:
            raise ValueError("grid too small")
        if self.kind == "LORENZ96_S" and self.n_vars != 1:
            raise ValueError("LORENZ96_S has a single variable")
        if not (self.damping > 0 and min(self.diffusivity, self.diffusivity_y, self.corr_length_y) >= 0 and self.corr_length > 0):
            raise ValueError("LINEAR_GAUSS needs damping > 0, corr_length > 0 and nonnegative diffusivities")
        if not (self.dt_hours > 0 and self.hours_per_mtu > 0):
            raise ValueError("time step and time scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySystemSpec":
        return cls(**d)


def _wavenumbers(height: int, width: int):
    ky = 2 * np.pi * np.fft.fftfreq(height)
    kx = 2 * np.pi * np.fft.fftfreq(width)
    return np.meshgrid(ky, kx, indexing="ij")


class LinearGaussSystem:
    def __init__(self, spec: ToySystemSpec):
        self.spec = spec
        ky, kx = _wavenumbers(spec.height, spec.width)
        # discrete Laplacian symbols, so the operators are exactly circulant
        self.decay_rate = spec.damping + 2 * spec.diffusivity * (1 - np.cos(kx)) + 2 * spec.diffusivity_y * (1 - np.cos(ky))
        self.eig = -self.decay_rate - 1j * spec.advection * np.sin(kx)
        p = np.exp(-0.5 * (spec.corr_length**2 * kx**2 + spec.corr_length_y**2 * ky**2))
        self.stationary = p / p.mean()

    @property
    def state_shape(self):
        return (self.spec.n_vars, self.spec.height, self.spec.width)

    def transition_mean(self, x0, t: float) -> np.ndarray:
        """E[X(t) | X(0) = x0] in raw units; x0 is (..., V, H, W)."""
        return np.fft.ifft2(np.exp(self.eig * t) * np.fft.fft2(x0)).real

    def transition_spectrum(self, t: float) -> np.ndarray:
        s = self.stationary * -np.expm1(-2.0 * self.decay_rate * t)
        return np.broadcast_to(s, self.state_shape).copy()

    def transition_cov(self, t: float) -> CirculantCovariance:
        return CirculantCovariance(self.transition_spectrum(t))

    def stationary_cov(self) -> CirculantCovariance:
        return CirculantCovariance(np.broadcast_to(self.stationary, self.state_shape).copy())

    def _filter_noise(self, spectrum, white):
        return np.fft.ifft2(np.sqrt(spectrum) * np.fft.fft2(white)).real

    def simulate(self, n_hours: int, rng: np.random.Generator, x0=None) -> np.ndarray:
        """Hourly snapshots (n_hours + 1, ..., V, H, W), exact transitions.

        ``x0`` may carry leading batch axes for independent trajectories.
        """
        if x0 is None:
            x0 = self._filter_noise(self.stationary, rng.standard_normal(self.state_shape))
        shape = np.shape(x0)
        out = np.empty((n_hours + 1,) + shape)
        out[0] = x0
        one_hour = self.transition_spectrum(1.0)
        prop = np.exp(self.eig)
        for n in range(n_hours):
            mean = np.fft.ifft2(prop * np.fft.fft2(out[n])).real
            out[n + 1] = mean + self._filter_noise(one_hour, rng.standard_normal(shape))
        return out

    def prior(self, grid: GridSpec, window_len: int = 1):
        """Standardized-unit prior p(X(t) | window) for the analytic backend."""
        m = grid.means[None]
        s = grid.stds[None]
        v = grid.n_vars

        def prior_fn(cond, t):
            x0 = cond[:, :v] * s + m
            mean = (self.transition_mean(x0, t) - m) / s
            spec_ = self.transition_spectrum(t) / grid.stds**2
            return AnalyticGaussianModel(mean, CirculantCovariance(spec_, check=False))

        return prior_fn

    def analytic_backend(self, grid: GridSpec, window_len: int, lead_time_scale: float) -> AnalyticBackend:
        return AnalyticBackend(self.prior(grid, window_len), grid.n_vars, window_len, lead_time_scale)


class Lorenz96System:
    def __init__(self, spec: ToySystemSpec):
        self.spec = spec

    @property
    def state_shape(self):
        return (1, self.spec.height, self.spec.width)

    def tendency(self, x):
        return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + self.spec.lorenz_forcing

    def _rk4(self, x, h):
        k1 = self.tendency(x)
        k2 = self.tendency(x + 0.5 * h * k1)
        k3 = self.tendency(x + 0.5 * h * k2)
        k4 = self.tendency(x + h * k3)
        return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def integrate(self, x0, n_hours: int, increments, dt_hours: float | None = None) -> np.ndarray:
        """Hourly snapshots driven by given unit-variance Wiener increments.

        ``increments`` has shape (n_hours * steps_per_hour, *x0.shape) at the
        native step; with ``dt_hours`` = k * native step, consecutive groups
        of k increments are summed so the Brownian path is unchanged.
        """
        spec = self.spec
        native = spec.dt_hours
        dt = native if dt_hours is None else dt_hours
        group = int(round(dt / native))
        steps_per_hour = int(round(1.0 / native))
        if abs(group * native - dt) > 1e-12 or steps_per_hour % group:
            raise ValueError("dt_hours must be a multiple of the native step dividing one hour")
        h = dt / spec.hours_per_mtu
        out = np.empty((n_hours + 1,) + np.shape(x0))
        x = np.array(x0, dtype=np.float64)
        out[0] = x
        amp = spec.noise_amplitude * np.sqrt(native / spec.hours_per_mtu)
        k = 0
        for n in range(n_hours):
            for _ in range(steps_per_hour // group):
                dw = increments[k : k + group].sum(axis=0)
                k += group
                x = self._rk4(x, h) + amp * dw
            out[n + 1] = x
        return out

    def draw_increments(self, n_hours: int, rng: np.random.Generator, shape=None) -> np.ndarray:
        shape = self.state_shape if shape is None else shape
        steps = int(round(n_hours / self.spec.dt_hours))
        return rng.standard_normal((steps,) + tuple(shape))

    def spinup_state(self, rng: np.random.Generator, hours: int = 500) -> np.ndarray:
        x0 = self.spec.lorenz_forcing + rng.standard_normal(self.state_shape)
        return self.integrate(x0, hours, self.draw_increments(hours, rng))[-1]

    def simulate(self, n_hours: int, rng: np.random.Generator, x0=None) -> np.ndarray:
        if x0 is None:
            x0 = self.spinup_state(rng)
        return self.integrate(x0, n_hours, self.draw_increments(n_hours, rng))

    def step_doubling_error(self, rng: np.random.Generator, hours: int = 24) -> float:
        """Relative RMS change of a ``hours`` trajectory when the step is doubled."""
        x0 = self.spinup_state(rng, 200)
        inc = self.draw_increments(hours, rng)
        fine = self.integrate(x0, hours, inc)
        coarse = self.integrate(x0, hours, inc, dt_hours=2 * self.spec.dt_hours)
        return float(np.sqrt(np.mean((fine[-1] - coarse[-1]) ** 2)) / np.sqrt(np.mean(fine[-1] ** 2)))


def build_system(spec: ToySystemSpec):
    return LinearGaussSystem(spec) if spec.kind == "LINEAR_GAUSS" else Lorenz96System(spec)
