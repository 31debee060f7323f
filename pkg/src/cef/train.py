"""Denoising objective, lead-time loss scales, AdamW and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .denoiser.core import lead_time_scale
from .denoiser.network import TrainingFault
from .edm import TRAINING_SCHEDULE, NoiseSchedule, precondition_arrays, sample_training_sigma
from .grid import GridSpec

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
SCALE_MODES = ("increment", "state", "unit")
SIGMA_WEIGHTINGS = ("inverse_square", "edm")
OBJECTIVES = ("denoising", "mse")


class TrainingDiverged(TrainingFault):
    pass


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 5e-4
    weight_decay: float = 0.1
    warmup_steps: int = 1000
    epochs: int = 300
    batch_size: int = 256
    dropout: float = 0.1
    final_lr_fraction: float = 1e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: NoiseSchedule = field(default_factory=lambda: TRAINING_SCHEDULE)
    lead_times: tuple = (6.0, 12.0, 18.0, 24.0)
    max_steps: int | None = None
    sigma_weighting: str = "inverse_square"
    scale_mode: str = "increment"
    objective: str = "denoising"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lead_times", tuple(float(t) for t in self.lead_times))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not (self.peak_lr >= 0 and self.weight_decay >= 0 and self.eps > 0):
            raise ValueError("learning rate, weight decay and eps must be nonnegative")
        if self.warmup_steps < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("warmup_steps >= 0, epochs >= 1 and batch_size >= 1 required")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in [0, 1)")
        if not self.lead_times or any(t <= 0 for t in self.lead_times):
            raise ValueError("lead_times must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.sigma_weighting not in SIGMA_WEIGHTINGS:
            raise ValueError(f"sigma_weighting must be one of {SIGMA_WEIGHTINGS}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def total_steps(self, n_cases: int) -> int:
        steps = self.epochs * math.ceil(n_cases / self.batch_size)
        return steps if self.max_steps is None else min(steps, self.max_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        d["betas"] = list(self.betas)
        d["lead_times"] = list(self.lead_times)
        return d


# -- training pairs -----------------------------------------------------------


class PairSet:
    """(window, lead time, target) triples drawn from a standardized hourly series.

    ``series`` is (T, V, H, W) with one state per hour; ``indices`` are the
    admissible initialization indices (already clear of split margins).
    """

    def __init__(self, series, spec: GridSpec, offsets, lead_times, indices):
        self.series = np.asarray(series, dtype=np.float64)
        self.spec = spec
        self.offsets = tuple(int(round(o)) for o in offsets)
        self.lead_times = tuple(float(t) for t in lead_times)
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ValueError("no admissible training pairs")
        lo = self.indices.min() + min(self.offsets)
        hi = self.indices.max() + int(round(max(self.lead_times)))
        if lo < 0 or hi >= len(self.series):
            raise ValueError("pair indices reach outside the series")

    def __len__(self):
        return int(self.indices.size)

    def cond(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        parts = [self.series[idx + o] for o in self.offsets]
        static = np.broadcast_to(self.spec.static_fields, (idx.size,) + self.spec.static_fields.shape)
        return np.concatenate(parts + [static], axis=1)

    def target(self, idx, leads) -> np.ndarray:
        return self.series[np.asarray(idx) + np.rint(leads).astype(np.int64)]

    def sample(self, rng: np.random.Generator, batch: int, lead_times=None):
        choices = np.asarray(self.lead_times if lead_times is None else lead_times, dtype=np.float64)
        if choices.max() > max(self.lead_times):
            raise ValueError(f"lead time {choices.max():g}h exceeds the {max(self.lead_times):g}h this pair set was built for")
        idx = self.indices[rng.integers(0, self.indices.size, size=batch)]
        leads = choices[rng.integers(0, choices.size, size=batch)]
        return self.cond(idx), self.target(idx, leads), leads


@dataclass(frozen=True)
class LeadTimeScale:
    lead_times: tuple
    table: np.ndarray  # (len(lead_times), V)
    mode: str = "increment"

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.shape[0] != len(self.lead_times) or not np.all(table > 0):
            raise ValueError("lead-time scales must be positive with one row per lead time")
        object.__setattr__(self, "table", table)

    def lookup(self, leads) -> np.ndarray:
        """(B, V) scales for a batch of lead times."""
        known = np.asarray(self.lead_times)
        leads = np.asarray(leads, dtype=np.float64)
        pos = np.argmin(np.abs(known[None, :] - leads[:, None]), axis=1)
        if not np.allclose(known[pos], leads, rtol=0, atol=1e-9):
            missing = sorted({float(t) for t in leads[~np.isclose(known[pos], leads, rtol=0, atol=1e-9)]})
            raise ValueError(f"no loss scale for lead times {missing}")
        return self.table[pos]

    def to_dict(self) -> dict:
        return {"lead_times": list(self.lead_times), "table": self.table.tolist(), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LeadTimeScale":
        return cls(tuple(d["lead_times"]), np.asarray(d["table"]), d.get("mode", "increment"))


def compute_leadtime_scales(pairs: PairSet, lead_times=None, mode: str = "increment") -> LeadTimeScale:
    """Per-variable, per-lead-time std used to balance the loss across leads.

    ``increment``: std of X_j(t) - X_j(0); ``state``: std of X_j(t);
    ``unit``: all ones.
    """
    if mode not in SCALE_MODES:
        raise ValueError(f"mode must be one of {SCALE_MODES}")
    lead_times = pairs.lead_times if lead_times is None else tuple(float(t) for t in lead_times)
    v = pairs.series.shape[1]
    table = np.ones((len(lead_times), v))
    if mode != "unit":
        idx = pairs.indices
        x0 = pairs.series[idx]
        for r, t in enumerate(lead_times):
            xt = pairs.target(idx, np.full(idx.size, t))
            diff = xt - x0 if mode == "increment" else xt
            table[r] = diff.transpose(1, 0, 2, 3).reshape(v, -1).std(axis=1)
    low = table < SCALE_FLOOR
    if np.any(low):
        for r, j in zip(*np.nonzero(low)):
            log.warning("lead-time scale for variable %d at %gh is %.3g; floored to %g", j, lead_times[r], table[r, j], SCALE_FLOOR)
        table = np.maximum(table, SCALE_FLOOR)
    return LeadTimeScale(lead_times, table, mode)


# -- objective ------------------------------------------------------------------


def sigma_weight(sigma, weighting: str = "inverse_square"):
    sigma = np.asarray(sigma, dtype=np.float64)
    if weighting == "inverse_square":
        return 1.0 / sigma**2
    if weighting == "edm":
        return (sigma**2 + 1.0) / sigma**2
    raise ValueError(f"unknown sigma weighting {weighting!r}")


def _reduce(per_cell) -> tuple[float, np.ndarray]:
    """Per-example sums then an exactly rounded batch mean."""
    b = per_cell.shape[0]
    per_ex = per_cell.reshape(b, -1).sum(axis=1)
    return math.fsum(per_ex.tolist()) / b, per_ex


def denoising_loss(
    backend,
    cond,
    target,
    lead_times,
    sigma,
    eps,
    area_weights,
    scales,
    weighting: str = "inverse_square",
    train: bool = False,
    rng=None,
    need_grad: bool = True,
):
    """Weighted denoising loss over a batch and its gradient w.r.t. theta.

    ``eps`` is already scaled by ``sigma``; ``scales`` is (B, V).
    Returns (loss, grad or None, per-example losses).
    """
    target = np.asarray(target, dtype=np.float64)
    b = target.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
    if np.any(sigma <= 0):
        raise ValueError("training sigma must be positive")
    noisy = target + eps
    c_skip, c_out, c_in, c_noise = precondition_arrays(sigma)
    col = (slice(None), None, None, None)
    t_norm = np.broadcast_to(np.asarray(lead_times, dtype=np.float64), (b,)) / lead_time_scale(backend)
    f, cache = backend.forward(c_in[col] * noisy, c_noise, t_norm, cond, train=train, rng=rng, keep=need_grad)
    resid = c_skip[col] * noisy + c_out[col] * f - target
    cell_w = np.asarray(area_weights)[None, None] / np.asarray(scales)[:, :, None, None] / resid[0].size
    lam = sigma_weight(sigma, weighting)[col]
    loss, per_ex = _reduce(lam * cell_w * resid**2)
    if not math.isfinite(loss):
        raise TrainingFault(f"nonfinite loss; sigma in [{sigma.min():.3g}, {sigma.max():.3g}], |resid| max {np.abs(resid).max():.3g}")
    grad = None
    if need_grad:
        dresid = 2.0 / b * lam * cell_w * resid
        grad, _ = backend.backward(cache, c_out[col] * dresid)
    return loss, grad, per_ex


def mse_loss(backend, cond, target, lead_times, area_weights, scales, train=False, rng=None, need_grad=True):
    """Regression loss for a deterministic model: F(0; 0, t, cond) predicts the state."""
    target = np.asarray(target, dtype=np.float64)
    b = target.shape[0]
    t_norm = np.broadcast_to(np.asarray(lead_times, dtype=np.float64), (b,)) / lead_time_scale(backend)
    f, cache = backend.forward(np.zeros_like(target), np.zeros(b), t_norm, cond, train=train, rng=rng, keep=need_grad)
    resid = f - target
    cell_w = np.asarray(area_weights)[None, None] / np.asarray(scales)[:, :, None, None] / resid[0].size
    loss, per_ex = _reduce(cell_w * resid**2)
    if not math.isfinite(loss):
        raise TrainingFault("nonfinite regression loss")
    grad = None
    if need_grad:
        grad, _ = backend.backward(cache, 2.0 / b * cell_w * resid)
    return loss, grad, per_ex


class MSEForecaster:
    """Deterministic one-step model with the ``predict(cond)`` interface."""

    kind = "mse"

    def __init__(self, net, delta: float):
        self.net = net
        self.delta = float(delta)

    def predict(self, cond) -> np.ndarray:
        cond = np.asarray(cond, dtype=np.float64)
        b = cond.shape[0]
        v = self.net.arch.target_channels
        zeros = np.zeros((b, v) + cond.shape[2:])
        return self.net.raw_apply(zeros, np.zeros(b), np.full(b, self.delta / self.net.arch.lead_time_scale), cond)


# -- optimizer ----------------------------------------------------------------------


def learning_rate(step: int, total: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to ``final_lr_fraction`` of it."""
    peak = config.peak_lr
    if step < config.warmup_steps:
        return peak * (step + 1) / config.warmup_steps
    final = peak * config.final_lr_fraction
    span = max(1, total - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.1):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, theta, grad, lr: float) -> np.ndarray:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        return theta - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * theta)


# -- loop -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    theta: np.ndarray
    losses: np.ndarray
    learning_rates: np.ndarray
    scales: LeadTimeScale
    steps: int
    validation: list = field(default_factory=list)  # (step, loss)


def draw_noise_batch(rng: np.random.Generator, shape, schedule: NoiseSchedule):
    """Per-example sigma from the training schedule and matching eps ~ N(0, sigma^2 I)."""
    sigma = sample_training_sigma(rng.random(shape[0]), schedule)
    eps = rng.standard_normal(shape) * sigma[:, None, None, None]
    return sigma, eps


def batch_loss(backend, config: TrainConfig, scales: LeadTimeScale, weights, batch, noise, train=False, rng=None, need_grad=True):
    cond, target, leads = batch
    s = scales.lookup(leads)
    if config.objective == "mse":
        return mse_loss(backend, cond, target, leads, weights, s, train, rng, need_grad)
    sigma, eps = noise
    return denoising_loss(backend, cond, target, leads, sigma, eps, weights, s, config.sigma_weighting, train, rng, need_grad)


def fixed_batch(pairs: PairSet, config: TrainConfig, size: int, seed: int):
    """A reproducible evaluation batch: pairs, sigma and eps drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    batch = pairs.sample(rng, size, config.lead_times)
    noise = draw_noise_batch(rng, batch[1].shape, config.schedule)
    return batch, noise


def train(
    pairs: PairSet,
    config: TrainConfig,
    backend,
    scales: LeadTimeScale | None = None,
    validation=None,
    validate_every: int = 0,
    log_every: int = 100,
) -> TrainResult:
    """Optimize ``backend.theta`` in place and return the loss curve.

    ``validation`` is an optional (batch, noise) pair from :func:`fixed_batch`.
    """
    if max(config.lead_times) > max(pairs.lead_times):
        raise ValueError(f"config lead times reach {max(config.lead_times):g}h but the pair set stops at {max(pairs.lead_times):g}h")
    scales = compute_leadtime_scales(pairs, config.lead_times, config.scale_mode) if scales is None else scales
    total = config.total_steps(len(pairs))
    if config.warmup_steps > total:
        raise ValueError(f"warmup_steps {config.warmup_steps} exceeds total steps {total}")
    weights = pairs.spec.area_weights
    rng = np.random.default_rng([config.seed, 0x7EA1])
    opt = AdamW(backend.theta.size, config.betas, config.eps, config.weight_decay)
    theta = backend.theta.copy()
    losses = np.empty(total)
    lrs = np.empty(total)
    val_curve = []
    initial = None
    for step in range(total):
        backend.theta = theta
        batch = pairs.sample(rng, config.batch_size, config.lead_times)
        noise = draw_noise_batch(rng, batch[1].shape, config.schedule) if config.objective == "denoising" else None
        loss, grad, _ = batch_loss(backend, config, scales, weights, batch, noise, train=config.dropout > 0, rng=rng)
        if initial is None:
            initial = loss
        elif loss > 1e3 * initial:
            raise TrainingDiverged(f"loss {loss:.4g} at step {step} exceeds 1000x the initial {initial:.4g}")
        lr = learning_rate(step, total, config)
        theta = opt.step(theta, grad, lr)
        losses[step], lrs[step] = loss, lr
        if validation is not None and validate_every and ((step + 1) % validate_every == 0 or step + 1 == total):
            backend.theta = theta
            vloss = batch_loss(backend, config, scales, weights, *validation, need_grad=False)[0]
            val_curve.append((step + 1, vloss))
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d/%d loss %.5f lr %.3g", step + 1, total, float(np.mean(losses[max(0, step + 1 - log_every) : step + 1])), lr)
    backend.theta = theta
    return TrainResult(theta, losses, lrs, scales, total, val_curve)
