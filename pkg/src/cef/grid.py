"""Grids, weighted states, conditioning windows and ensembles.

Every field lives on an H x W grid that is periodic along W (longitude-like)
and bounded along H (latitude-like). Cell areas are carried as weights with
unit mean so that a plain average of ``a * field`` is an area-weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridError(ValueError):
    """Raised when a state or field is inconsistent with its grid."""


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Variable:
    name: str
    mean: float = 0.0
    std: float = 1.0


def cosine_latitude_weights(height: int, width: int) -> np.ndarray:
    """Cell-centred cos(latitude) weights renormalized to unit mean."""
    lat = np.deg2rad(90.0 - 180.0 * (np.arange(height) + 0.5) / height)
    a = np.repeat(np.cos(lat)[:, None], width, axis=1)
    return a / a.mean()


def latitude_static_field(height: int, width: int) -> np.ndarray:
    """A [0, 1] field growing from the first to the last row."""
    if height == 1:
        return np.zeros((1, height, width))
    row = np.arange(height) / (height - 1)
    return np.repeat(row[:, None], width, axis=1)[None]


@dataclass(frozen=True, eq=False)
class GridSpec:
    height: int
    width: int
    area_weights: np.ndarray
    variables: tuple[Variable, ...]
    static_fields: np.ndarray = None
    wind_pair: tuple[str, str] | None = None

    def __post_init__(self):
        a = _frozen(self.area_weights)
        if a.shape != (self.height, self.width):
            raise GridError(f"area weights shape {a.shape} != {(self.height, self.width)}")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise GridError("area weights must be finite and nonnegative")
        if abs(a.mean() - 1.0) > 1e-12:
            raise GridError(f"area weights must have unit mean, got {a.mean()!r}")
        object.__setattr__(self, "area_weights", a)
        variables = tuple(v if isinstance(v, Variable) else Variable(*v) for v in self.variables)
        if not variables:
            raise GridError("a grid needs at least one variable")
        for v in variables:
            if not v.std > 0:
                raise GridError(f"standardization std of {v.name!r} must be > 0")
        if len({v.name for v in variables}) != len(variables):
            raise GridError("variable names must be unique")
        object.__setattr__(self, "variables", variables)
        static = np.zeros((0, self.height, self.width)) if self.static_fields is None else self.static_fields
        static = _frozen(static)
        if static.ndim != 3 or static.shape[1:] != (self.height, self.width):
            raise GridError(f"static fields must be (S, {self.height}, {self.width}), got {static.shape}")
        if static.size and (static.min() < 0 or static.max() > 1):
            raise GridError("static field values must lie in [0, 1]")
        object.__setattr__(self, "static_fields", static)
        if self.wind_pair is not None:
            names = self.variable_names
            u, v = self.wind_pair
            if u not in names or v not in names:
                raise GridError(f"wind pair {self.wind_pair} not among variables {names}")
            object.__setattr__(self, "wind_pair", (u, v))

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.n_vars, self.height, self.width)

    @property
    def means(self) -> np.ndarray:
        return np.array([v.mean for v in self.variables])[:, None, None]

    @property
    def stds(self) -> np.ndarray:
        return np.array([v.std for v in self.variables])[:, None, None]

    def index(self, name: str) -> int:
        return self.variable_names.index(name)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "area_weights": self.area_weights.tolist(),
            "variables": [[v.name, v.mean, v.std] for v in self.variables],
            "static_fields": self.static_fields.tolist(),
            "wind_pair": list(self.wind_pair) if self.wind_pair else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            area_weights=np.asarray(d["area_weights"], dtype=np.float64),
            variables=tuple(Variable(n, float(m), float(s)) for n, m, s in d["variables"]),
            static_fields=np.asarray(d["static_fields"], dtype=np.float64).reshape(
                -1, int(d["height"]), int(d["width"])
            ),
            wind_pair=tuple(d["wind_pair"]) if d.get("wind_pair") else None,
        )

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = object.__hash__


def make_grid_spec(
    height: int = 16,
    width: int = 32,
    variables: Sequence = ("var0",),
    static: bool = True,
    wind_pair=None,
) -> GridSpec:
    """Toy grid with cosine-latitude weights and unit standardization."""
    vars_ = tuple(v if isinstance(v, Variable) else Variable(v) if isinstance(v, str) else Variable(*v) for v in variables)
    return GridSpec(
        height=height,
        width=width,
        area_weights=cosine_latitude_weights(height, width),
        variables=vars_,
        static_fields=latitude_static_field(height, width) if static else None,
        wind_pair=wind_pair,
    )


@dataclass(frozen=True, eq=False)
class GridState:
    spec: GridSpec
    values: np.ndarray
    valid_time: float = 0.0

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.spec.state_shape:
            raise GridError(f"state shape {v.shape} != {self.spec.state_shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("state values must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class ConditioningWindow:
    """States at offsets 0 > -d1 > -d2 ... (hours) relative to the initial time."""

    states: tuple[GridState, ...]
    offsets: tuple[float, ...]

    def __post_init__(self):
        states = tuple(self.states)
        offsets = tuple(float(o) for o in self.offsets)
        if not states or len(states) != len(offsets):
            raise GridError("window needs one state per offset")
        if offsets[0] != 0.0 or any(b >= a for a, b in zip(offsets, offsets[1:])):
            raise GridError(f"offsets must start at 0 and strictly decrease, got {offsets}")
        spec = states[0].spec
        if any(s.spec != spec for s in states[1:]):
            raise GridError("all window states must share one grid spec")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "offsets", offsets)

    @property
    def spec(self) -> GridSpec:
        return self.states[0].spec

    @property
    def init_time(self) -> float:
        return self.states[0].valid_time

    def stack(self) -> np.ndarray:
        """Conditioning channels: window states in offset order, then static fields."""
        return np.concatenate([s.values for s in self.states] + [self.spec.static_fields], axis=0)

    @classmethod
    def from_array(cls, spec: GridSpec, values: np.ndarray, offsets, init_time: float = 0.0):
        """Build from an (|offsets|, V, H, W) array ordered like ``offsets``."""
        return cls(
            tuple(GridState(spec, v, init_time + o) for v, o in zip(values, offsets)),
            tuple(offsets),
        )


@dataclass(frozen=True, eq=False)
class EnsembleForecast:
    """Member x lead-time forecast of one initial window.

    ``data`` has shape (n_ens, n_leads, V, H, W) in standardized units.
    """

    spec: GridSpec
    lead_times: np.ndarray
    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        lt = _frozen(self.lead_times)
        data = np.array(self.data, copy=True)
        data.setflags(write=False)
        if lt.ndim != 1 or lt.size == 0 or np.any(lt <= 0) or np.any(np.diff(lt) <= 0):
            raise GridError(f"lead times must be positive and strictly increasing, got {lt}")
        if data.ndim != 5 or data.shape[1] != lt.size or data.shape[2:] != self.spec.state_shape:
            raise GridError(f"forecast data shape {data.shape} inconsistent with leads/grid")
        if not np.all(np.isfinite(data)):
            raise GridError("forecast contains nonfinite values")
        object.__setattr__(self, "lead_times", lt)
        object.__setattr__(self, "data", data)

    @property
    def n_ens(self) -> int:
        return self.data.shape[0]

    def state(self, member: int, lead_index: int) -> GridState:
        return GridState(self.spec, self.data[member, lead_index], float(self.lead_times[lead_index]))


def standardize(raw, spec: GridSpec, valid_time: float = 0.0) -> GridState:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != spec.state_shape:
        raise GridError(f"raw shape {raw.shape} != {spec.state_shape}")
    if not np.all(np.isfinite(raw)):
        raise GridError("raw input contains nonfinite values")
    return GridState(spec, (raw - spec.means) / spec.stds, valid_time)


def standardize_array(raw, spec: GridSpec) -> np.ndarray:
    """Vectorized standardization over leading dims of a (..., V, H, W) array."""
    return (np.asarray(raw, dtype=np.float64) - spec.means) / spec.stds


def destandardize(state) -> np.ndarray:
    if isinstance(state, GridState):
        return state.values * state.spec.stds + state.spec.means
    raise TypeError("destandardize expects a GridState; use destandardize_array for raw arrays")


def destandardize_array(values, spec: GridSpec) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * spec.stds + spec.means


def derived_wind_speed(u, v) -> np.ndarray:
    """Wind speed sqrt(u^2 + v^2) from physical-unit components."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise GridError(f"wind components differ in shape: {u.shape} vs {v.shape}")
    return np.hypot(u, v)


def weighted_mean(field_, spec_or_weights) -> np.ndarray | float:
    """Area-weighted mean over the trailing (H, W) axes."""
    a = spec_or_weights.area_weights if isinstance(spec_or_weights, GridSpec) else np.asarray(spec_or_weights)
    f = np.asarray(field_, dtype=np.float64)
    if f.shape[-2:] != a.shape:
        raise GridError(f"field shape {f.shape} does not end with grid shape {a.shape}")
    out = (f * a).mean(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out
