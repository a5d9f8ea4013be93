"""Scaling sweeps and the CO2 forecasting pipeline behind the CLI."""
from __future__ import annotations

import csv
import json
import logging
import math
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, engine
from .config import ExperimentConfig, format_kernel
from .data import SinusoidConfig, generate_sinusoid_data
from .engine import Dataset
from .kernels import EQApprox, Kernel, Matern32, Sum
from .optimize import optimize_hyperparameters

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

__all__ = [
    "ScalingReport",
    "ForecastResult",
    "time_call",
    "loglog_slope",
    "run_scaling_n",
    "run_scaling_b",
    "run_co2_forecast",
    "kernel_for_block_size",
    "SCHEMA_VERSION",
]


def time_call(fn, repetitions: int = 5, warmup: int = 1):
    """Median wall time of ``fn()`` over ``repetitions`` runs after ``warmup`` runs.

    Returns ``(median_seconds, last_result)``.
    """
    out = None
    for _ in range(warmup):
        out = fn()
    ts = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)), out


def loglog_slope(x, seconds) -> float:
    """Least-squares slope of ln(seconds) against ln(x)."""
    x = np.asarray(x, dtype=float)
    s = np.asarray(seconds, dtype=float)
    ok = np.isfinite(s) & (s > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(s[ok]), 1)[0])


def _peak_rss_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def _jitter(cfg: ExperimentConfig, default: float = engine.DEFAULT_JITTER) -> float:
    return default if cfg.jitter is None else cfg.jitter


def _evaluator(method: str, cfg: ExperimentConfig):
    backend = cfg.backend or None
    if method == "spingp":
        return lambda d, k, s2: engine.mll_and_gradient(d, k, None, s2, jitter=_jitter(cfg), backend=backend, threads=cfg.threads)
    if method == "kf":
        return lambda d, k, s2: baselines.kf_mll_and_gradient(d, k, s2)
    if method == "dense":
        return lambda d, k, s2: baselines.dense_gp_mll_and_gradient(d, k, None, s2)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class ScalingReport:
    variable: str  # "N" or "b"
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return sum(1 for r in self.rows if r["error"])

    def fit_slopes(self, subset=None):
        self.slopes = {}
        for m in sorted({r["method"] for r in self.rows}):
            rs = [r for r in self.rows if r["method"] == m and not r["error"]]
            if subset is not None:
                rs = [r for r in rs if r[self.variable] in subset]
            self.slopes[m] = loglog_slope([r[self.variable] for r in rs], [r["seconds"] for r in rs])
        return self.slopes

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["method", self.variable, "seconds", "mll", "peak_rss_kb", "error"]
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        metrics = {
            "schema_version": SCHEMA_VERSION,
            "variable": self.variable,
            "slopes": self.slopes,
            "errors": self.errors,
            **self.meta,
        }
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _run_cells(cells, cfg: ExperimentConfig):
    """Evaluate timing cells, sequentially unless ``parallel_cells`` is set."""

    def one(cell):
        method, key, value, data, kernel = cell
        row = {"method": method, key: value, "seconds": float("nan"), "mll": float("nan"), "error": ""}
        try:
            fn = _evaluator(method, cfg)
            sec, (mll, _) = time_call(lambda: fn(data, kernel, cfg.noise), cfg.repetitions)
            row.update(seconds=sec, mll=float(mll))
        except Exception as exc:  # recorded per row; the sweep continues
            log.error("%s at %s=%s failed: %s", method, key, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["peak_rss_kb"] = _peak_rss_kb()
        return row

    if cfg.parallel_cells:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(one, cells))
    return [one(c) for c in cells]


def _meta(cfg: ExperimentConfig, **extra):
    return {
        "config": cfg.as_dict(),
        "sinusoid": SinusoidConfig().as_dict(),
        "timing": {"statistic": "median", "repetitions": cfg.repetitions, "warmup": 1, "clock": "perf_counter"},
        "timing_meaningful": not cfg.parallel_cells,
        **extra,
    }


def run_scaling_n(cfg: ExperimentConfig) -> ScalingReport:
    """Time MLL plus gradient for every (method, N) cell on sinusoid data."""
    kernel = cfg.kernel_obj()
    cells = []
    for m in cfg.methods:
        for n in sorted(cfg.n_values):
            cells.append((m, "N", n, generate_sinusoid_data(n, cfg.seed), kernel))
    rep = ScalingReport("N", _run_cells(cells, cfg))
    rep.rows.sort(key=lambda r: (r["method"], r["N"]))
    rep.fit_slopes()
    rep.meta = _meta(cfg, kernel=format_kernel(kernel), state_dim=kernel.state_dim)
    return rep


def kernel_for_block_size(b: int) -> Kernel:
    """Matern-3/2 plus an EQ approximation of order ``b - 2`` (Matern-3/2 alone for ``b = 2``)."""
    if b < 2 or b % 2:
        raise ValueError(f"block size must be even and >= 2, got {b}")
    m = Matern32(1.0, 5.0)
    return m if b == 2 else Sum((m, EQApprox(1.0, 10.0, b - 2)))


def run_scaling_b(cfg: ExperimentConfig) -> ScalingReport:
    """Time MLL plus gradient at fixed N while the state dimension grows."""
    data = generate_sinusoid_data(cfg.n, cfg.seed)
    cells = []
    for m in cfg.methods:
        for b in sorted(cfg.b_values):
            cells.append((m, "b", b, data, kernel_for_block_size(b)))
    rep = ScalingReport("b", _run_cells(cells, cfg))
    rep.rows.sort(key=lambda r: (r["method"], r["b"]))
    rep.fit_slopes()
    rep.meta = _meta(cfg, N=cfg.n, kernels={b: format_kernel(kernel_for_block_size(b)) for b in cfg.b_values})
    return rep


@dataclass
class ForecastResult:
    times: np.ndarray
    mean: np.ndarray  # original units
    variance: np.ndarray
    kf_mean: np.ndarray
    kf_variance: np.ndarray
    metrics: dict

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_forecast_csv(out / "forecast.csv", self.times, self.mean, self.variance)
        write_forecast_csv(out / "forecast_kf.csv", self.times, self.kf_mean, self.kf_variance)
        with open(out / "metrics.json", "w") as fh:
            json.dump({"schema_version": SCHEMA_VERSION, **self.metrics}, fh, indent=2, default=_json_default)


def write_forecast_csv(path, times, mean, variance) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean", "variance"])
        for row in zip(times, mean, variance):
            w.writerow([repr(float(v)) for v in row])


WEEK_IN_YEARS = 7.0 / 365.25
# Weekly sampling against a decade-long EQ lengthscale leaves the high-order
# process-noise directions far below double resolution; 1e-10 makes the MLL
# too noisy for the line search, 1e-8 keeps it within ~1e-3 of the filter.
CO2_JITTER = 1e-8


def run_co2_forecast(data: Dataset, cfg: ExperimentConfig) -> ForecastResult:
    """Hold out the final years, fit on the rest, forecast weekly past the data.

    The forecast grid is every held-out observation time followed by
    ``52 * forecast_years`` weekly steps after the last observation. Both the
    sparse-precision engine and the Kalman smoother predict at the fitted
    hyperparameters so their outputs are directly comparable.
    """
    t, y = data.times, data.values
    cut = t[-1] - cfg.holdout_years
    train = t <= cut
    if train.sum() < 2 or (~train).sum() < 1:
        raise ValueError("not enough data on both sides of the hold-out split")
    tr = Dataset(t[train], y[train])
    kernel = cfg.kernel_obj()
    jitter = _jitter(cfg, CO2_JITTER)
    t0 = time.perf_counter()
    fit = optimize_hyperparameters(tr, kernel, cfg.noise, budget=cfg.budget, jitter=jitter, backend=cfg.backend or None)
    fit_seconds = time.perf_counter() - t0
    n_future = int(round(52 * cfg.forecast_years))
    future = t[-1] + WEEK_IN_YEARS * np.arange(1, n_future + 1)
    grid = np.concatenate([t[~train], future])
    ps = engine.predict(tr, fit.kernel, None, fit.noise, grid, include_noise=False, with_grad=False, jitter=jitter)
    kf_mean, kf_var = baselines.kf_rts_predict(tr, fit.kernel, fit.noise, grid)
    held = slice(0, int((~train).sum()))
    y_held = y[~train]
    rmse = float(np.sqrt(np.mean((ps.mean[held] - y_held) ** 2)))
    const = float(np.mean(tr.values))
    rmse_const = float(np.sqrt(np.mean((const - y_held) ** 2)))
    metrics = {
        "n_total": int(t.size),
        "n_train": int(train.sum()),
        "n_heldout": int((~train).sum()),
        "n_future_weeks": n_future,
        "heldout_rmse": rmse,
        "constant_mean_rmse": rmse_const,
        "max_abs_diff_spingp_kf": float(np.max(np.abs(ps.mean - kf_mean))),
        "max_abs_diff_spingp_kf_heldout": float(np.max(np.abs(ps.mean[held] - kf_mean[held]))),
        "mll": fit.mll,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "optimizer_message": fit.message,
        "line_search_failed": fit.line_search_failed,
        "fit_seconds": fit_seconds,
        "kernel": format_kernel(fit.kernel),
        "noise_variance": fit.noise,
        "initial_kernel": cfg.kernel,
        "value_shift": data.shift,
        "jitter": jitter,
        "config": cfg.as_dict(),
    }
    if not math.isfinite(rmse):
        raise ArithmeticError("non-finite forecast")
    return ForecastResult(
        grid,
        data.denormalize(ps.mean),
        data.denormalize_variance(ps.variance),
        data.denormalize(kf_mean),
        data.denormalize_variance(kf_var),
        metrics,
    )
