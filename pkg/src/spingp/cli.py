"""Command-line entry point: ``spingp <subcommand> [options]``.

Settings resolve in order: built-in defaults, then ``--config FILE``
(``key = value`` lines), then explicit flags. The exit status is nonzero
exactly when some sub-run raised; partial results are still written.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, engine
from .config import DEFAULT_CO2_KERNEL, ExperimentConfig, format_kernel, load_config_file
from .data import SinusoidConfig, generate_sinusoid_data, ingest_co2_csv
from .engine import Dataset
from .experiments import SCHEMA_VERSION, _json_default, run_co2_forecast, run_scaling_b, run_scaling_n, write_forecast_csv
from .optimize import optimize_hyperparameters

log = logging.getLogger("spingp")

_SUBCOMMAND_DEFAULTS = {
    "co2": {"kernel": DEFAULT_CO2_KERNEL, "noise": 0.1},
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--kernel", help="kernel expression, e.g. 'matern32(var=1, len=2) + eq(len=10, order=10)'")
    p.add_argument("--method", action="append", help="spingp, kf or dense; repeat or comma-separate for several")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads for block cyclic reduction and gradient traces")
    p.add_argument("--out", help="output directory")
    p.add_argument("--repetitions", type=int, help="timed repetitions per cell (after one warm-up)")
    p.add_argument("--noise", type=float, help="noise variance")
    p.add_argument("--jitter", type=float, help="relative process-noise jitter")
    p.add_argument("--backend", choices=["numba", "numpy"], help="block-recursion kernels")
    p.add_argument("--parallel-cells", action="store_true", default=None, help="run sweep cells concurrently (timings then not meaningful)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spingp", description="Temporal GP inference through block-tridiagonal precisions.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a two-sinusoid synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--noise-std", type=float, default=None, help="observation noise std (default 0.2)")

    p = sub.add_parser("fit", help="maximize the marginal likelihood")
    _common(p)
    p.add_argument("--data", help="CSV with time,value columns (default: synthetic data of size --n)")
    p.add_argument("--n", type=int)
    p.add_argument("--budget", type=int, help="optimizer iteration budget")

    p = sub.add_parser("predict", help="posterior mean and variance at test times")
    _common(p)
    p.add_argument("--data", help="CSV with time,value columns (default: synthetic data of size --n)")
    p.add_argument("--n", type=int)
    p.add_argument("--test-times", help="'start:stop:count' or a file with one time per line")
    p.add_argument("--include-noise", action="store_true", default=None)

    p = sub.add_parser("scaling-n", help="time MLL + gradient over a sweep of N")
    _common(p)
    p.add_argument("--n-values", help="comma-separated sweep, default 1000,2000,4000,8000")

    p = sub.add_parser("scaling-b", help="time MLL + gradient over a sweep of block sizes")
    _common(p)
    p.add_argument("--n", type=int, help="dataset size (default 1000)")
    p.add_argument("--b-values", help="comma-separated even block sizes, default 2,4,8,12,16")

    p = sub.add_parser("co2", help="fit and forecast the Mauna Loa weekly CO2 record")
    _common(p)
    p.add_argument("--data", help="NOAA weekly file (co2_weekly_mlo.txt)")
    p.add_argument("--budget", type=int)
    p.add_argument("--holdout-years", type=float)
    p.add_argument("--forecast-years", type=float)
    return ap


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig().updated(**_SUBCOMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        cfg = cfg.updated(**load_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "noise_std")}
    if flags.get("method"):
        flags["methods"] = ",".join(flags["method"])
    flags.pop("method", None)
    return cfg.updated(**flags)


def _read_series(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    arr = np.array([[float(r[0]), float(r[1])] for r in rows if r])
    if arr.size == 0:
        raise ValueError(f"{path}: no data rows")
    return Dataset(arr[:, 0], arr[:, 1])


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _dataset(cfg: ExperimentConfig) -> Dataset:
    return _read_series(cfg.data) if cfg.data else generate_sinusoid_data(cfg.n, cfg.seed)


def _test_times(spec: str, data: Dataset) -> np.ndarray:
    if not spec:
        lo, hi = data.times[0], data.times[-1]
        return np.linspace(lo, hi, 2 * len(data) + 1)
    if Path(spec).exists():
        return np.loadtxt(spec, ndmin=1)
    a, b, c = spec.split(":")
    return np.linspace(float(a), float(b), int(c))


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **obj}, fh, indent=2, default=_json_default)


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    sc = SinusoidConfig() if args.noise_std is None else SinusoidConfig(noise_std=args.noise_std)
    d = generate_sinusoid_data(cfg.n, cfg.seed, sc)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "value"])
        w.writerows((repr(float(t)), repr(float(v))) for t, v in zip(d.times, d.values))
    _write_json(out / "metrics.json", {"n": cfg.n, "seed": cfg.seed, "sinusoid": sc.as_dict()})
    return 0


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    d = _dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    summary = {}
    rows = []
    for m in cfg.methods:
        try:
            kw = {"jitter": cfg.jitter, "backend": cfg.backend or None} if m == "spingp" else {}
            kw = {k: v for k, v in kw.items() if v is not None}
            r = optimize_hyperparameters(d, cfg.kernel_obj(), cfg.noise, budget=cfg.budget, method=m, **kw)
            summary[m] = {
                "kernel": format_kernel(r.kernel),
                "noise_variance": r.noise,
                "mll": r.mll,
                "iterations": r.iterations,
                "converged": r.converged,
                "message": r.message,
                "line_search_failed": r.line_search_failed,
            }
            rows += [(m, i, mll, " ".join(repr(float(v)) for v in x)) for i, (x, mll) in enumerate(r.trace)]
        except Exception as exc:
            log.error("fit with %s failed: %s", m, exc)
            summary[m] = {"error": f"{type(exc).__name__}: {exc}"}
            failed += 1
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "step", "mll", "params"])
        w.writerows(rows)
    _write_json(out / "metrics.json", {"n": len(d), "results": summary, "config": cfg.as_dict()})
    return 1 if failed else 0


def cmd_predict(cfg: ExperimentConfig, args) -> int:
    d = _dataset(cfg)
    s = _test_times(cfg.test_times, d)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    kernel = cfg.kernel_obj()
    failed = 0
    metrics = {}
    for m in cfg.methods:
        try:
            if m == "spingp":
                kw = {} if cfg.jitter is None else {"jitter": cfg.jitter}
                ps = engine.predict(d, kernel, None, cfg.noise, s, cfg.include_noise, backend=cfg.backend or None, **kw)
                mean, var = ps.mean, ps.variance
                metrics[m] = {"mll": ps.mll, "mll_grad": ps.mll_grad, "param_names": ps.param_names}
            elif m == "kf":
                mean, var = baselines.kf_rts_predict(d, kernel, cfg.noise, s, cfg.include_noise)
                metrics[m] = {"mll": baselines.kf_mll(d, kernel, cfg.noise)}
            else:
                r = baselines.dense_gp_predict(d, kernel, None, cfg.noise, s, cfg.include_noise)
                mean, var = r.mean, r.variance
                metrics[m] = {"mll": r.mll, "cond": r.cond}
            name = "forecast.csv" if m == cfg.methods[0] else f"forecast_{m}.csv"
            write_forecast_csv(out / name, s, d.denormalize(mean), d.denormalize_variance(var))
        except Exception as exc:
            log.error("predict with %s failed: %s", m, exc)
            metrics[m] = {"error": f"{type(exc).__name__}: {exc}"}
            failed += 1
    _write_json(out / "metrics.json", {"n": len(d), "m": int(s.size), "results": metrics, "config": cfg.as_dict()})
    return 1 if failed else 0


def cmd_scaling(cfg: ExperimentConfig, args) -> int:
    rep = run_scaling_n(cfg) if args.command == "scaling-n" else run_scaling_b(cfg)
    rep.write(cfg.out)
    for m, s in rep.slopes.items():
        log.info("%s: log-log slope %.3f", m, s)
    return 1 if rep.errors else 0


def cmd_co2(cfg: ExperimentConfig, args) -> int:
    if not cfg.data:
        log.error("co2 needs --data pointing at the NOAA weekly file")
        return 2
    res = run_co2_forecast(ingest_co2_csv(cfg.data), cfg)
    res.write(cfg.out)
    m = res.metrics
    log.info("held-out RMSE %.3f ppm (constant mean %.3f); %d optimizer iterations", m["heldout_rmse"], m["constant_mean_rmse"], m["iterations"])
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "scaling-n": cmd_scaling,
    "scaling-b": cmd_scaling,
    "co2": cmd_co2,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        log.error("bad configuration: %s", exc)
        return 2
    try:
        return _COMMANDS[args.command](cfg, args)
    except Exception as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
