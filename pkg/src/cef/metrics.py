"""Area-weighted probabilistic verification scores.

Array conventions: ensembles are (n_cases, n_ens, n_leads, V, H, W) and
truths (n_cases, n_leads, V, H, W). Scores come back as (n_leads, V)
tables, averaged uniformly over cases.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, derived_wind_speed, destandardize_array

CSV_COLUMNS = ("variable", "lead_time_h", "rmse", "spread", "ssr", "crps", "delta_x", "n_ens", "n_cases")


class MetricError(ValueError):
    pass


def _check(forecasts, truths, weights):
    f = np.asarray(forecasts, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if f.ndim != 6 or y.ndim != 5:
        raise MetricError("expected (cases, ens, leads, V, H, W) forecasts and (cases, leads, V, H, W) truths")
    if f.shape[0] == 0 or f.shape[1] == 0:
        raise MetricError("empty case or member set")
    if f.shape[:1] + f.shape[2:] != y.shape:
        raise MetricError(f"forecast shape {f.shape} does not match truth shape {y.shape}")
    a = np.asarray(weights, dtype=np.float64)
    if a.shape != y.shape[-2:]:
        raise MetricError(f"weights shape {a.shape} != grid {y.shape[-2:]}")
    return f, y, a


def _wmean(x, a):
    return (x * a).mean(axis=(-2, -1))


def rmse(forecasts, truths, weights) -> np.ndarray:
    """Case mean of the area-weighted RMSE of the ensemble mean."""
    f, y, a = _check(forecasts, truths, weights)
    return np.sqrt(_wmean((f.mean(axis=1) - y) ** 2, a)).mean(axis=0)


def spread(forecasts, truths, weights) -> np.ndarray:
    """Case mean of the root area-weighted (n - 1) ensemble variance."""
    f, y, a = _check(forecasts, truths, weights)
    if f.shape[1] < 2:
        raise MetricError("spread needs at least two members")
    return np.sqrt(_wmean(f.var(axis=1, ddof=1), a)).mean(axis=0)


def spread_and_ssr(forecasts, truths, weights):
    """(spread, ssr) with ssr = sqrt((n + 1) / n) * spread / rmse.

    Where spread is zero the ratio is reported as zero.
    """
    s = spread(forecasts, truths, weights)
    r = rmse(forecasts, truths, weights)
    n = np.asarray(forecasts).shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ssr = np.where(s == 0, 0.0, np.sqrt((n + 1) / n) * s / r)
    return s, ssr


def crps_cells(forecasts, truths, fair: bool = False) -> np.ndarray:
    """Per-cell ensemble CRPS, (cases, leads, V, H, W).

    mean_k |x_k - y| - sum_kk' |x_k - x_k'| / (2 n^2), or / (2 n (n - 1))
    when ``fair``. The pair sum uses the sorted-member identity
    sum_kk' |x_k - x_k'| = 2 sum_i (2i - n + 1) x_(i).
    """
    f = np.asarray(forecasts, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    n = f.shape[1]
    skill = np.abs(f - y[:, None]).mean(axis=1)
    if n == 1:
        return skill
    if fair:
        denom = 2.0 * n * (n - 1)
    else:
        denom = 2.0 * n * n
    coef = (2.0 * np.arange(n) - n + 1).reshape((1, n) + (1,) * (f.ndim - 2))
    pair_sum = 2.0 * (coef * np.sort(f, axis=1)).sum(axis=1)
    out = skill - pair_sum / denom
    # the n^2 form is nonnegative; clip roundoff only
    return out if fair else np.maximum(out, 0.0)


def crps(forecasts, truths, weights, fair: bool = False) -> np.ndarray:
    f, y, a = _check(forecasts, truths, weights)
    return _wmean(crps_cells(f, y, fair), a).mean(axis=0)


def temporal_difference(trajectories, weights) -> np.ndarray:
    """Mean absolute change between consecutive times.

    ``trajectories`` is (cases, members, times, V, H, W); returns a
    (times - 1, V) table averaged over cases, members and weighted cells.
    """
    x = np.asarray(trajectories, dtype=np.float64)
    if x.ndim != 6:
        raise MetricError("expected (cases, members, times, V, H, W) trajectories")
    if x.shape[2] < 2:
        raise MetricError("temporal difference needs at least two times")
    a = np.asarray(weights, dtype=np.float64)
    return _wmean(np.abs(np.diff(x, axis=2)), a).mean(axis=(0, 1))


@dataclass
class MetricReport:
    variables: list
    lead_times: np.ndarray
    rmse: np.ndarray  # (n_leads, V)
    spread: np.ndarray | None
    ssr: np.ndarray | None
    crps: np.ndarray
    delta_x: np.ndarray
    n_ens: int
    n_cases: int
    delta_step_h: float = 1.0

    def __post_init__(self):
        tables = [self.rmse, self.crps, self.delta_x] + ([self.spread, self.ssr] if self.n_ens >= 2 else [])
        for t in tables:
            if not np.all(np.isfinite(t)) or np.any(t < 0):
                raise MetricError("metric tables must be finite and nonnegative")
        if self.n_ens < 2 and (self.spread is not None or self.ssr is not None):
            raise MetricError("spread and ssr are undefined for fewer than two members")

    def value(self, metric: str, variable: str, lead_time: float) -> float:
        table = getattr(self, metric)
        return float(table[int(np.flatnonzero(np.isclose(self.lead_times, lead_time))[0]), self.variables.index(variable)])

    def to_csv(self) -> str:
        def fmt(x):
            return format(float(x), ".17g")

        out = io.StringIO()
        out.write(",".join(CSV_COLUMNS) + "\n")
        for j, name in enumerate(self.variables):
            for i, t in enumerate(self.lead_times):
                ens = self.n_ens >= 2
                row = [
                    name,
                    fmt(t),
                    fmt(self.rmse[i, j]),
                    fmt(self.spread[i, j]) if ens else "",
                    fmt(self.ssr[i, j]) if ens else "",
                    fmt(self.crps[i, j]),
                    fmt(self.delta_x[i, j]),
                    str(self.n_ens),
                    str(self.n_cases),
                ]
                out.write(",".join(row) + "\n")
        return out.getvalue()


def _with_wind_speed(x, spec: GridSpec, var_axis: int):
    """Append a derived wind-speed channel built from physical u and v."""
    u, v = (np.take(x, spec.index(n), axis=var_axis) for n in spec.wind_pair)
    return np.concatenate([x, np.expand_dims(derived_wind_speed(u, v), var_axis)], axis=var_axis)


def evaluate(forecasts, truths, initial, spec: GridSpec, lead_times, fair: bool = False, physical: bool = True) -> MetricReport:
    """Full report for standardized forecasts against standardized truths.

    ``initial`` is the (cases, V, H, W) state at lead 0, used as the first
    point of every trajectory for the temporal difference.
    """
    f, y, a = _check(forecasts, truths, spec.area_weights)
    x0 = np.asarray(initial, dtype=np.float64)
    lead_times = np.asarray(lead_times, dtype=np.float64)
    if lead_times.shape != (f.shape[2],):
        raise MetricError("lead_times do not match the forecast lead axis")
    names = list(spec.variable_names)
    if physical:
        f, y, x0 = (destandardize_array(z, spec) for z in (f, y, x0))
    if spec.wind_pair is not None:
        f, y, x0 = _with_wind_speed(f, spec, 3), _with_wind_speed(y, spec, 2), _with_wind_speed(x0, spec, 1)
        names.append("wind_speed")
    n_ens = f.shape[1]
    traj = np.concatenate([np.broadcast_to(x0[:, None, None], (f.shape[0], n_ens, 1) + x0.shape[1:]), f], axis=2)
    sp, ss = spread_and_ssr(f, y, a) if n_ens >= 2 else (None, None)
    steps = np.diff(np.concatenate([[0.0], lead_times]))
    step_h = float(steps[0]) if np.allclose(steps, steps[0]) else float("nan")
    return MetricReport(
        variables=names,
        lead_times=lead_times,
        rmse=rmse(f, y, a),
        spread=sp,
        ssr=ss,
        crps=crps(f, y, a, fair),
        delta_x=temporal_difference(traj, a),
        n_ens=n_ens,
        n_cases=f.shape[0],
        delta_step_h=step_h,
    )
