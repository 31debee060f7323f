"""Experiment configuration: a JSON tree with fixed sections and defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from ..edm import NoiseSchedule
from ..forecast import ForecastPlan
from ..sampler import SamplerConfig
from ..train import TrainConfig
from .container import digest
from .systems import ToySystemSpec

DEFAULTS = {
    "data": {
        "system": ToySystemSpec().to_dict(),
        "hours": 20000,
        "split": [0.7, 0.15, 0.15],
        "offsets": [0, -6],
        "horizon": 24,
    },
    "diffusion": {
        "sampling": {"sigma_max": 80.0, "sigma_min": 0.03, "rho_sched": 7.0, "n_levels": 20},
        "training": {"sigma_max": 88.0, "sigma_min": 0.02, "rho_sched": 7.0, "n_levels": 20},
        "initial_scale_rule": "sigma",
    },
    "train": {
        "peak_lr": 5e-4,
        "weight_decay": 0.1,
        "warmup_steps": 1000,
        "epochs": 300,
        "batch_size": 256,
        "dropout": 0.1,
        "final_lr_fraction": 1e-6,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "lead_times": [6, 12, 18, 24],
        "max_steps": None,
        "sigma_weighting": "inverse_square",
        "scale_mode": "increment",
        "objective": "denoising",
        "width": 32,
        "blocks": 3,
        "lead_time_scale": 240.0,
        "dtype": "float64",
        "validation_batch": 512,
        "validate_every": 0,
    },
    "forecast": {
        "algorithm": "CONTINUOUS",
        "times": [6, 12, 18, 24],
        "steps": 1,
        "n_ens": 8,
        "rho": 0.0,
        "inner": "CONTINUOUS",
        "block_times": None,
        "gp_length_scale": None,
        "noise_time_unit": 24.0,
        "backend": "trained",
        "dtype": "float64",
        "split": "test",
        "cases": None,
        "case_stride": 1,
    },
    "evaluate": {"crps_fair": False},
    "seeds": {"master": 0},
}

# keys whose value is free-form (no nested key checking)
_OPEN = {("data", "split"), ("data", "offsets"), ("train", "betas"), ("train", "lead_times"), ("forecast", "times"), ("forecast", "block_times")}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=()):
    unknown = sorted(set(override) - set(base))
    if unknown:
        where = ".".join(path) or "<root>"
        raise ConfigError(f"unknown config keys under {where}: {', '.join(unknown)}")
    out = copy.deepcopy(base)
    for key, val in override.items():
        sub = path + (key,)
        if isinstance(base[key], dict) and sub not in _OPEN:
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(sub)} must be an object")
            out[key] = _merge(base[key], val, sub)
        else:
            out[key] = val
    return out


def load_config(source=None, seed: int | None = None) -> dict:
    """Defaults merged with a JSON file or dict; ``seed`` overrides every seed."""
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        try:
            user = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seeds"]["master"] = int(seed)
        cfg["data"]["system"]["base_seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed view once so bad values fail early."""
    try:
        system_spec(cfg)
        train_config(cfg)
        sampler_config(cfg)
        forecast_plan(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    split = cfg["data"]["split"]
    if len(split) != 3 or any(f <= 0 for f in split) or abs(sum(split) - 1) > 1e-9:
        raise ConfigError("data.split must be three positive fractions summing to 1")
    offsets = cfg["data"]["offsets"]
    if not offsets or offsets[0] != 0 or any(b >= a for a, b in zip(offsets, offsets[1:])):
        raise ConfigError("data.offsets must start at 0 and strictly decrease")
    if cfg["forecast"]["backend"] not in ("trained", "analytic"):
        raise ConfigError("forecast.backend must be 'trained' or 'analytic'")
    if cfg["forecast"]["split"] not in ("train", "val", "test"):
        raise ConfigError("forecast.split must be train, val or test")
    cases = cfg["forecast"]["cases"]
    if cases is not None and (not isinstance(cases, int) or cases < 1):
        raise ConfigError("forecast.cases must be a positive integer or null (all admissible cases)")
    stride = cfg["forecast"]["case_stride"]
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError("forecast.case_stride must be a positive integer")
    if cfg["train"]["dtype"] not in ("float32", "float64") or cfg["forecast"]["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")


def config_hash(cfg: dict) -> str:
    return digest(cfg)[:16]


def system_spec(cfg: dict) -> ToySystemSpec:
    return ToySystemSpec.from_dict(cfg["data"]["system"])


def _schedule(d: dict) -> NoiseSchedule:
    return NoiseSchedule(d["sigma_max"], d["sigma_min"], d["rho_sched"], d["n_levels"])


def sampler_config(cfg: dict) -> SamplerConfig:
    d = cfg["diffusion"]
    return SamplerConfig(_schedule(d["sampling"]), d["initial_scale_rule"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    keys = ("peak_lr", "weight_decay", "warmup_steps", "epochs", "batch_size", "dropout", "final_lr_fraction",
            "betas", "eps", "lead_times", "max_steps", "sigma_weighting", "scale_mode", "objective")
    return TrainConfig(schedule=_schedule(cfg["diffusion"]["training"]), seed=cfg["seeds"]["master"], **{k: t[k] for k in keys})


def forecast_plan(cfg: dict) -> ForecastPlan:
    f = cfg["forecast"]
    keys = ("algorithm", "times", "steps", "n_ens", "rho", "inner", "block_times", "gp_length_scale", "noise_time_unit")
    return ForecastPlan(master_seed=cfg["seeds"]["master"], **{k: f[k] for k in keys})
