"""Hourly datasets from the toy systems, with contiguous margin-safe splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..grid import ConditioningWindow, GridSpec, Variable, make_grid_spec, standardize_array
from ..train import PairSet
from .container import read_container, write_container
from .systems import ToySystemSpec, build_system

SPLITS = ("train", "val", "test")


def split_ranges(n_times: int, fractions) -> dict:
    """Contiguous [start, stop) index ranges in train, val, test order."""
    b1 = int(round(fractions[0] * n_times))
    b2 = b1 + int(round(fractions[1] * n_times))
    return {"train": [0, b1], "val": [b1, b2], "test": [b2, n_times]}


def admissible_indices(span, offsets, horizon: int, stride: int = 1) -> np.ndarray:
    """Init indices whose window and every lead up to ``horizon`` lie in ``span``."""
    lo = span[0] - int(min(offsets))
    hi = span[1] - 1 - int(horizon)
    return np.arange(lo, hi + 1, stride, dtype=np.int64) if hi >= lo else np.zeros(0, dtype=np.int64)


def generate_dataset(system: ToySystemSpec, hours: int, split=(0.7, 0.15, 0.15), offsets=(0, -6), horizon: int = 24):
    """Simulate ``hours`` hourly steps; returns (meta, arrays) for a dataset container.

    Standardization statistics come from the training split only.
    """
    n_times = int(hours) + 1
    spans = split_ranges(n_times, split)
    margin = max(-int(min(offsets)), int(horizon))
    for name, span in spans.items():
        if admissible_indices(span, offsets, horizon).size == 0:
            raise ValueError(
                f"{hours}h is too short: the {name} split {span} cannot hold a window of {-min(offsets)}h "
                f"plus a {horizon}h horizon (margin {margin}h)"
            )
    model = build_system(system)
    rng = np.random.default_rng(system.base_seed)
    values = model.simulate(int(hours), rng)
    train = values[spans["train"][0] : spans["train"][1]]
    means = train.mean(axis=(0, 2, 3))
    stds = train.std(axis=(0, 2, 3))
    names = [f"var{j}" for j in range(values.shape[1])]
    grid = make_grid_spec(system.height, system.width, [Variable(n, float(m), float(s)) for n, m, s in zip(names, means, stds)])
    if system.kind == "LORENZ96_S":
        check = {"method": "step doubling, 24h, matched Brownian path", "rel_rms_change": model.step_doubling_error(np.random.default_rng([system.base_seed, 1]))}
    else:
        check = {"method": "exact transition", "rel_rms_change": 0.0}
    meta = {
        "system": system.to_dict(),
        "grid": grid.to_dict(),
        "time": {"start_h": 0, "step_h": 1, "count": n_times},
        "splits": spans,
        "split_fractions": list(split),
        "offsets": [int(o) for o in offsets],
        "horizon": int(horizon),
        "seeds": {"base_seed": system.base_seed},
        "integration_check": check,
    }
    return meta, {"values": values}


def write_dataset(path, meta: dict, arrays: dict) -> Path:
    return write_container(path, "dataset", meta, arrays)


@dataclass
class Dataset:
    meta: dict
    raw: np.ndarray  # (T, V, H, W) physical units, as stored

    def __post_init__(self):
        self.spec = GridSpec.from_dict(self.meta["grid"])
        self.system = ToySystemSpec.from_dict(self.meta["system"])
        self.series = standardize_array(self.raw, self.spec)
        self.offsets = tuple(self.meta["offsets"])
        self.horizon = int(self.meta["horizon"])

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = read_container(path, "dataset")[1:]
        return cls(meta, arrays["values"].astype(np.float64))

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict) -> "Dataset":
        # round through float32 so in-memory and on-disk datasets agree
        return cls(meta, np.asarray(arrays["values"], dtype="<f4").astype(np.float64))

    def span(self, split: str):
        return self.meta["splits"][split]

    def indices(self, split: str, stride: int = 1, horizon: int | None = None) -> np.ndarray:
        return admissible_indices(self.span(split), self.offsets, self.horizon if horizon is None else horizon, stride)

    def pairs(self, split: str, lead_times) -> PairSet:
        return PairSet(self.series, self.spec, self.offsets, lead_times, self.indices(split, horizon=int(max(lead_times))))

    def window(self, index: int) -> ConditioningWindow:
        vals = self.series[[index + o for o in self.offsets]]
        return ConditioningWindow.from_array(self.spec, vals, [float(o) for o in self.offsets], float(index))

    def truth(self, index: int, lead_times) -> np.ndarray:
        """(n_leads, V, H, W) standardized truth."""
        return self.series[index + np.rint(np.asarray(lead_times)).astype(np.int64)]
