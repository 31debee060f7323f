"""Per-lead-time metric curves: SVG figure plus a CSV of every plotted point."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..metrics import CSV_COLUMNS  # noqa: E402
from .container import atomic_write  # noqa: E402

PLOTTABLE = ("rmse", "spread", "ssr", "crps", "delta_x")


class PlotError(ValueError):
    pass


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise PlotError(f"{path}: not a metrics CSV (columns {reader.fieldnames})")
        return list(reader)


def collect_series(sources, metric: str) -> list[tuple[str, str, float, float]]:
    """(series, variable, lead_time_h, value) rows from (label, csv path) pairs."""
    if metric not in PLOTTABLE:
        raise PlotError(f"metric must be one of {', '.join(PLOTTABLE)}")
    out = []
    for label, path in sources:
        for row in read_metrics_csv(path):
            if row[metric] == "":
                continue
            out.append((label, row["variable"], float(row["lead_time_h"]), float(row[metric])))
    if not out:
        raise PlotError(f"no {metric} values in the given files")
    return out


def render(rows, metric: str) -> bytes:
    """One panel per variable, one line per series; deterministic SVG bytes."""
    variables = list(dict.fromkeys(r[1] for r in rows))
    series = list(dict.fromkeys(r[0] for r in rows))
    ncol = min(3, len(variables))
    nrow = math.ceil(len(variables) / ncol)
    with plt.rc_context({"svg.hashsalt": "cef", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3 * nrow), squeeze=False)
        for ax, var in zip(axes.flat, variables):
            for name in series:
                pts = sorted((t, v) for s, n, t, v in rows if s == name and n == var)
                if pts:
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name)
            ax.set_title(var)
            ax.set_xlabel("lead time (h)")
            ax.set_ylabel(metric.upper())
            ax.grid(alpha=0.3)
        for ax in list(axes.flat)[len(variables):]:
            ax.set_visible(False)
        axes.flat[0].legend(fontsize=8)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "cef"})
        plt.close(fig)
    return buf.getvalue()


def sidecar_csv(rows, metric: str) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["series", "variable", "lead_time_h", metric])
    for s, var, t, v in rows:
        w.writerow([s, var, format(t, ".17g"), format(v, ".17g")])
    return out.getvalue()


def plot_metric(sources, metric: str, out) -> tuple[Path, Path]:
    """Write ``out`` (SVG) and ``out`` with a .csv suffix; returns both paths."""
    out = Path(out)
    rows = collect_series(sources, metric)
    svg = atomic_write(out, render(rows, metric))
    side = atomic_write(out.with_suffix(".csv"), sidecar_csv(rows, metric))
    return svg, side
