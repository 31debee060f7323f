"""File-level stages: train, forecast, evaluate. Each is a pure function of its inputs."""

from __future__ import annotations

import numpy as np

from ..denoiser import Architecture, ConvResNet
from ..forecast import ForecastPlan, deterministic_forecast, run_plan
from ..grid import EnsembleForecast, GridSpec
from ..metrics import MetricReport, evaluate
from ..sampler import SamplerConfig
from ..train import LeadTimeScale, MSEForecaster, TrainConfig, compute_leadtime_scales, fixed_batch, train
from . import config as C
from .container import ContainerError, read_container, write_container
from .data import Dataset
from .systems import build_system


class PipelineError(ValueError):
    pass


# -- models -----------------------------------------------------------------------


def make_network(spec: GridSpec, n_window: int, width: int, blocks: int, dropout: float, lead_time_scale: float, seed: int, dtype="float64") -> ConvResNet:
    arch = Architecture(
        target_channels=spec.n_vars,
        cond_channels=n_window * spec.n_vars + spec.static_fields.shape[0],
        width=width,
        blocks=blocks,
        dropout=dropout,
        lead_time_scale=lead_time_scale,
    )
    return ConvResNet(arch, seed=seed, dtype=np.dtype(dtype))


def train_model(dataset: Dataset, tc: TrainConfig, width=32, blocks=3, lead_time_scale=240.0, dtype="float64", validation_batch=512, validate_every=0):
    """Train a denoiser (or a deterministic regressor) on the training split."""
    pairs = dataset.pairs("train", tc.lead_times)
    net = make_network(dataset.spec, len(dataset.offsets), width, blocks, tc.dropout, lead_time_scale, tc.seed, dtype)
    scales = compute_leadtime_scales(pairs, tc.lead_times, tc.scale_mode)
    val = None
    if validate_every:
        val = fixed_batch(dataset.pairs("val", tc.lead_times), tc, validation_batch, tc.seed + 1)
    result = train(pairs, tc, net, scales, validation=val, validate_every=validate_every, log_every=0)
    net.trained_lead_times = tc.lead_times
    return net, result


def train_from_config(cfg: dict, dataset: Dataset):
    t = cfg["train"]
    return train_model(
        dataset, C.train_config(cfg), t["width"], t["blocks"], t["lead_time_scale"], t["dtype"], t["validation_batch"], t["validate_every"]
    )


def save_checkpoint(path, net: ConvResNet, result, tc: TrainConfig, dataset: Dataset, config_hash: str = ""):
    meta = {
        "architecture": net.arch.to_dict(),
        "compute_dtype": net.dtype.name,
        "objective": tc.objective,
        "trained_lead_times": list(tc.lead_times),
        "train_config": tc.to_dict(),
        "scales": result.scales.to_dict(),
        "grid": dataset.spec.to_dict(),
        "offsets": list(dataset.offsets),
        "steps": result.steps,
        "validation": [[int(s), float(v)] for s, v in result.validation],
        "config_hash": config_hash,
    }
    arrays = {"theta": net.theta, "losses": result.losses, "learning_rates": result.learning_rates}
    return write_container(path, "checkpoint", meta, arrays, dtypes={k: "<f8" for k in arrays})


def load_checkpoint(path, dtype=None):
    """Returns (model, meta); model is a ConvResNet or, for MSE checkpoints, an MSEForecaster."""
    _, meta, arrays = read_container(path, "checkpoint")
    arch = Architecture.from_dict(meta["architecture"])
    net = ConvResNet(arch, theta=arrays["theta"], dtype=np.dtype(dtype or meta["compute_dtype"]))
    net.trained_lead_times = tuple(meta["trained_lead_times"])
    if meta["objective"] == "mse":
        if len(meta["trained_lead_times"]) != 1:
            raise PipelineError("a deterministic checkpoint must be trained on a single lead time")
        return MSEForecaster(net, meta["trained_lead_times"][0]), meta
    return net, meta


def analytic_backend(dataset: Dataset, lead_time_scale: float = 240.0):
    system = build_system(dataset.system)
    if dataset.system.kind != "LINEAR_GAUSS":
        raise PipelineError("the analytic backend exists only for LINEAR_GAUSS data")
    return system.analytic_backend(dataset.spec, len(dataset.offsets), lead_time_scale)


# -- forecasting --------------------------------------------------------------------


def case_indices(dataset: Dataset, split: str, n_cases: int | None, stride: int, horizon: float) -> np.ndarray:
    """The first ``n_cases`` admissible initial indices (all of them when None)."""
    idx = dataset.indices(split, stride=stride, horizon=int(np.ceil(horizon)))
    if n_cases is None:
        n_cases = idx.size
    if idx.size == 0 or idx.size < n_cases:
        raise PipelineError(f"{split} split offers {idx.size} cases at stride {stride}h, {n_cases} requested")
    return idx[:n_cases]


def forecast_cases(dataset: Dataset, indices, plan: ForecastPlan, model, sampler: SamplerConfig = SamplerConfig()):
    """Run ``plan`` from every initial index; returns a list of EnsembleForecast."""
    out = []
    for case, i in enumerate(indices):
        # decorrelate cases while keeping each one reproducible on its own
        seed = int(np.random.SeedSequence([plan.master_seed, int(i)]).generate_state(1, np.uint64)[0] >> np.uint64(1))
        window = dataset.window(int(i))
        if plan.algorithm == "DETERMINISTIC":
            delta = model.delta
            steps = int(round(max(plan.absolute_lead_times()) / delta))
            traj = deterministic_forecast(window, delta, steps, model)
            times = delta * np.arange(1, steps + 1)
            out.append(EnsembleForecast(dataset.spec, times, traj[None], {"algorithm": "DETERMINISTIC", "delta_h": delta}))
        else:
            case_plan = ForecastPlan(**{**_plan_kwargs(plan), "master_seed": seed})
            fc = run_plan(window, case_plan, model, sampler)
            fc.provenance["case_seed"] = seed
            out.append(fc)
    return out


def _plan_kwargs(plan: ForecastPlan) -> dict:
    return dict(
        algorithm=plan.algorithm, times=plan.times, steps=plan.steps, n_ens=plan.n_ens, rho=plan.rho,
        master_seed=plan.master_seed, inner=plan.inner, block_times=plan.block_times,
        gp_length_scale=plan.gp_length_scale, noise_time_unit=plan.noise_time_unit,
    )


def persist_forecast(path, forecasts, indices, meta: dict | None = None):
    """Write one or more EnsembleForecasts (one per case) to a forecast container."""
    if isinstance(forecasts, EnsembleForecast):
        forecasts = [forecasts]
    forecasts = list(forecasts)
    if not forecasts or len(forecasts) != len(indices):
        raise PipelineError("need exactly one forecast per case index")
    ref = forecasts[0]
    for fc in forecasts[1:]:
        if fc.data.shape != ref.data.shape or not np.array_equal(fc.lead_times, ref.lead_times) or fc.spec != ref.spec:
            raise PipelineError("forecasts differ in shape, lead times or grid; refusing a partial or ragged set")
    header = {
        "grid": ref.spec.to_dict(),
        "lead_times": ref.lead_times.tolist(),
        "case_indices": [int(i) for i in indices],
        "n_ens": ref.n_ens,
        "provenance": [fc.provenance for fc in forecasts],
        **(meta or {}),
    }
    data = np.stack([fc.data for fc in forecasts])
    return write_container(path, "forecast", header, {"forecast": data})


def load_forecast(path):
    _, meta, arrays = read_container(path, "forecast")
    return meta, arrays["forecast"].astype(np.float64)


# -- evaluation ---------------------------------------------------------------------


def _alignment_diff(meta: dict, dataset: Dataset) -> list[str]:
    diffs = []
    grid = GridSpec.from_dict(meta["grid"])
    if grid != dataset.spec:
        ours, theirs = grid.to_dict(), dataset.spec.to_dict()
        diffs += [f"grid.{k}: forecast {ours[k]!r} vs dataset {theirs[k]!r}" for k in ours if ours[k] != theirs[k]]
    last = len(dataset.series) - 1
    horizon = max(meta["lead_times"])
    bad = [i for i in meta["case_indices"] if i + min(dataset.offsets) < 0 or i + horizon > last]
    if bad:
        diffs.append(f"case_indices outside the dataset time range: {bad[:5]}")
    return diffs


def evaluate_forecast(meta: dict, data: np.ndarray, dataset: Dataset, fair: bool = False) -> MetricReport:
    diffs = _alignment_diff(meta, dataset)
    if diffs:
        raise PipelineError("forecast and dataset are misaligned:\n  " + "\n  ".join(diffs))
    lead_times = np.asarray(meta["lead_times"])
    idx = meta["case_indices"]
    truths = np.stack([dataset.truth(i, lead_times) for i in idx])
    initial = dataset.series[np.asarray(idx)]
    return evaluate(data, truths, initial, dataset.spec, lead_times, fair=fair)


def evaluate_files(forecast_path, dataset_path, fair: bool = False) -> MetricReport:
    try:
        meta, data = load_forecast(forecast_path)
    except ContainerError as exc:
        raise PipelineError(f"{forecast_path}: {exc}") from None
    return evaluate_forecast(meta, data, Dataset.load(dataset_path), fair)


def load_model_for_forecast(cfg: dict, dataset: Dataset, model_path):
    if cfg["forecast"]["backend"] == "analytic":
        return analytic_backend(dataset, cfg["train"]["lead_time_scale"])
    if model_path is None:
        raise PipelineError("a trained backend needs --model")
    model, _ = load_checkpoint(model_path, cfg["forecast"]["dtype"])
    return model


def scales_from_meta(meta: dict) -> LeadTimeScale:
    return LeadTimeScale.from_dict(meta["scales"])
