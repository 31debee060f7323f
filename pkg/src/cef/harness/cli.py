"""Command-line entry point. Stages talk to each other only through files.

Exit codes: 0 success, 1 invalid input (flags, config, files), 2 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..sampler import SamplerError
from ..train import TrainingFault
from . import config as C
from .checks import gradcheck, max_rel_error, selftest
from .container import ContainerError, atomic_write, canonical_json, file_digest
from .data import Dataset, generate_dataset, write_dataset
from .pipeline import (
    PipelineError,
    case_indices,
    evaluate_forecast,
    forecast_cases,
    load_forecast,
    load_model_for_forecast,
    persist_forecast,
    save_checkpoint,
    train_from_config,
)
from .plotting import PlotError, plot_metric

log = logging.getLogger("cef")

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that is a validation error (1)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", type=Path, help="output file")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="cef", description="Continuous ensemble forecasting on toy systems.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate-data", parents=[common], help="simulate a toy system into a dataset container")

    p = sub.add_parser("train", parents=[common], help="train a denoiser or deterministic regressor")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("forecast", parents=[common], help="run the configured forecast plan over test cases")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, help="checkpoint (not needed for the analytic backend)")

    p = sub.add_parser("evaluate", parents=[common], help="score a forecast file against its dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--forecast", type=Path, required=True)

    p = sub.add_parser("plot", parents=[common], help="per-lead-time metric curves as SVG plus CSV")
    p.add_argument("--metric", required=True)
    p.add_argument("--input", type=Path, action="append", required=True, help="metrics CSV (repeatable)")
    p.add_argument("--label", action="append", help="series label per --input")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--coords", type=int, default=10)

    sub.add_parser("selftest", parents=[common], help="fast invariant checks")
    return parser


def _need_out(args):
    if args.out is None:
        raise UsageError(f"cef {args.command}: --out is required")
    return args.out


def _config(args) -> dict:
    return C.load_config(args.config, args.seed)


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    d = cfg["data"]
    meta, arrays = generate_dataset(C.system_spec(cfg), d["hours"], d["split"], d["offsets"], d["horizon"])
    meta["config_hash"] = C.config_hash(cfg)
    write_dataset(_need_out(args), meta, arrays)
    log.info("wrote %s (%d hours, integration check %s)", args.out, d["hours"], meta["integration_check"])
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _need_out(args)
    dataset = Dataset.load(args.data)
    net, result = train_from_config(cfg, dataset)
    save_checkpoint(out, net, result, C.train_config(cfg), dataset, C.config_hash(cfg))
    log.info("trained %d steps, final loss %.5f", result.steps, float(result.losses[-1]))
    return 0


def cmd_forecast(args) -> int:
    cfg = _config(args)
    out = _need_out(args)
    dataset = Dataset.load(args.data)
    plan = C.forecast_plan(cfg)
    model = load_model_for_forecast(cfg, dataset, args.model)
    f = cfg["forecast"]
    horizon = float(plan.absolute_lead_times().max())
    idx = case_indices(dataset, f["split"], f["cases"], f["case_stride"], horizon)
    fcs = forecast_cases(dataset, idx, plan, model, C.sampler_config(cfg))
    meta = {
        "config_hash": C.config_hash(cfg),
        "plan": plan.to_dict(),
        "sampler": C.sampler_config(cfg).schedule.digest(),
        "dataset_digest": file_digest(args.data),
        "model_digest": file_digest(args.model) if args.model else None,
    }
    persist_forecast(out, fcs, idx, meta)
    log.info("wrote %d cases x %d members to %s", len(idx), fcs[0].n_ens, out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _need_out(args)
    meta, data = load_forecast(args.forecast)
    report = evaluate_forecast(meta, data, Dataset.load(args.data), cfg["evaluate"]["crps_fair"])
    atomic_write(out, report.to_csv())
    side = {
        "config_hash": C.config_hash(cfg),
        "forecast_config_hash": meta.get("config_hash"),
        "forecast_digest": file_digest(args.forecast),
        "dataset_digest": file_digest(args.data),
        "crps_fair": cfg["evaluate"]["crps_fair"],
        "delta_step_h": report.delta_step_h if np.isfinite(report.delta_step_h) else None,
    }
    atomic_write(out.with_name(out.name + ".json"), canonical_json(side) + "\n")
    return 0


def cmd_plot(args) -> int:
    out = _need_out(args)
    labels = args.label or [p.stem for p in args.input]
    if len(labels) != len(args.input):
        raise UsageError("give one --label per --input")
    svg, side = plot_metric(list(zip(labels, args.input)), args.metric, out)
    log.info("wrote %s and %s", svg, side)
    return 0


def cmd_gradcheck(args) -> int:
    probes = gradcheck(args.draws, args.coords, seed=args.seed or 0)
    worst = max_rel_error(probes)
    lines = ["target,draw,coord,analytic,numeric,rel_error"]
    lines += [f"{p.target},{p.draw},{p.coord},{p.analytic:.17g},{p.numeric:.17g},{p.rel_error:.3e}" for p in probes]
    if args.out:
        atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"{len(probes)} probes, max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    if not worst < GRADCHECK_TOL:
        raise TrainingFault(f"gradient check failed: max relative error {worst:.3e}")
    return 0


def cmd_selftest(args) -> int:
    lines = []

    def emit(line):
        lines.append(line)
        print(line)

    ok = selftest(emit)
    if args.out:
        atomic_write(args.out, "\n".join(lines) + "\n")
    if not ok:
        raise RuntimeError("self-test failed")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}

# input problems (exit 1) versus faults while running (exit 2)
_INVALID = (UsageError, C.ConfigError, ContainerError, PipelineError, PlotError, FileNotFoundError, json.JSONDecodeError)
_FAULTS = (TrainingFault, SamplerError, FloatingPointError, np.linalg.LinAlgError, MemoryError, OSError, RuntimeError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _INVALID as exc:
        print(f"cef {args.command}: {exc}", file=sys.stderr)
        return 1
    except _FAULTS as exc:
        print(f"cef {args.command}: runtime fault: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # remaining ValueErrors come from argument and config checks in the core
        print(f"cef {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
