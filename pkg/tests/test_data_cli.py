import csv
import json
from pathlib import Path

import numpy as np
import pytest

from spingp import Dataset, generate_sinusoid_data, ingest_co2_csv, log_marginal_likelihood
from spingp.cli import main
from spingp.config import DEFAULT_KERNEL, ExperimentConfig, KernelSyntaxError, format_kernel, load_config_file, parse_kernel
from spingp.data import SinusoidConfig
from spingp.errors import NoValidRows
from spingp.experiments import kernel_for_block_size, loglog_slope, run_scaling_b, run_scaling_n
from spingp.kernels import EQApprox, Matern12, Matern32, Sum

DATA = Path(__file__).parent / "data"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_sinusoid_deterministic():
    a, b = generate_sinusoid_data(500, 3), generate_sinusoid_data(500, 3)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_sinusoid_data(500, 4).values)


def test_sinusoid_noiseless():
    c = SinusoidConfig(noise_std=0.0)
    d = generate_sinusoid_data(10000, 0, c)
    t = np.arange(10000.0)
    assert np.array_equal(d.values, np.sin(2 * np.pi * 0.04 * t) + 0.6 * np.sin(2 * np.pi * 0.17 * t))


def test_sinusoid_noise_variance():
    n = 100_000
    noisy = generate_sinusoid_data(n, 1).values
    clean = generate_sinusoid_data(n, 1, SinusoidConfig(noise_std=0.0)).values
    assert abs(np.var(noisy - clean) - 0.04) <= 0.05 * 0.04


def test_co2_tiny():
    d = ingest_co2_csv(DATA / "co2_tiny.txt")
    assert len(d) == 4
    ppm = np.array([333.37, 332.95, 332.32, 332.18])
    np.testing.assert_allclose(d.denormalize(d.values), ppm)
    assert abs(d.values.mean()) < 1e-12


def test_co2_fixture_count():
    d = ingest_co2_csv(DATA / "co2_weekly_mlo_1958_2001.txt")
    assert len(d) == 2225
    assert np.all(np.diff(d.times) > 0)


def test_co2_errors(tmp_path):
    p = tmp_path / "comments.txt"
    p.write_text("# header\n# nothing else\n")
    with pytest.raises(NoValidRows):
        ingest_co2_csv(p)
    p.write_text("2000 1 1 2000.0 370.0 7\n2000 1 1 1999.9 371.0 7\n")
    with pytest.raises(ValueError, match="increasing"):
        ingest_co2_csv(p)
    with pytest.raises(OSError):
        ingest_co2_csv(tmp_path / "missing.txt")


def test_kernel_grammar():
    k = parse_kernel("matern32(var=1.0, len=2.5) + eq(var=1.0, len=100, order=10)")
    assert isinstance(k, Sum) and k.state_dim == 12
    assert parse_kernel(format_kernel(k)) == k
    assert parse_kernel("exp(variance=2, lengthscale=0.5)") == Matern12(2.0, 0.5)
    assert parse_kernel("rbf(len=3, order=4)") == EQApprox(1.0, 3.0, 4)
    assert parse_kernel("matern32") == Matern32()
    for bad in ["", "matern32(1, 2)", "foo(len=1)", "matern32(len=-1)", "matern32(order=4)", "matern32(len=x)", "matern32(len=1) * eq()", "eq(order=3)", "__import__('os')"]:
        with pytest.raises(KernelSyntaxError):
            parse_kernel(bad)


def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nkernel = matern12(len=3)\nmethod = spingp, kf\nn_values = 10 20\nseed=9\nparallel-cells = yes\n")
    cfg = ExperimentConfig().updated(**load_config_file(p))
    assert cfg.kernel == "matern12(len=3)" and cfg.methods == ("spingp", "kf")
    assert cfg.n_values == (10, 20) and cfg.seed == 9 and cfg.parallel_cells
    with pytest.raises(ValueError):
        ExperimentConfig().updated(colour="red")
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("magic",))
    with pytest.raises(ValueError):
        ExperimentConfig(repetitions=0)


def test_loglog_slope():
    x = np.array([1, 2, 4, 8.0])
    assert loglog_slope(x, 3 * x**1.5) == pytest.approx(1.5)


def test_block_size_kernels():
    for b in (2, 4, 8, 12, 16):
        assert kernel_for_block_size(b).state_dim == b
    with pytest.raises(ValueError):
        kernel_for_block_size(3)


def test_scaling_report_reproducible(tmp_path):
    cfg = ExperimentConfig(n_values=(50, 20), methods=("spingp", "kf"), repetitions=1, out=str(tmp_path))
    rep = run_scaling_n(cfg)
    rep.write(tmp_path)
    rows = read_csv(tmp_path / "report.csv")
    assert len(rows) == 4
    assert [r["N"] for r in rows] == ["20", "50", "20", "50"]
    meta = json.loads((tmp_path / "metrics.json").read_text())
    assert meta["schema_version"] == 1 and set(meta["slopes"]) == {"spingp", "kf"}
    for r in rows:
        if r["method"] == "spingp":
            c = meta["config"]
            d = generate_sinusoid_data(int(r["N"]), c["seed"])
            again = log_marginal_likelihood(d, parse_kernel(meta["kernel"]), None, c["noise"])
            assert abs(float(r["mll"]) - again) <= 1e-12 * abs(again)


def test_scaling_b_rows():
    rep = run_scaling_b(ExperimentConfig(n=60, b_values=(2, 4, 8), repetitions=1))
    assert [r["b"] for r in rep.rows] == [2, 4, 8]
    assert rep.errors == 0


def test_scaling_b_cross_method():
    rep = run_scaling_b(ExperimentConfig(n=80, b_values=(4, 8), methods=("spingp", "kf", "dense"), repetitions=1, parallel_cells=True))
    by = {(r["method"], r["b"]): r["mll"] for r in rep.rows}
    for b in (4, 8):
        assert by[("spingp", b)] == pytest.approx(by[("kf", b)], rel=1e-6)
        assert by[("dense", b)] == pytest.approx(by[("kf", b)], rel=1e-6)


def run_cli(*args):
    return main([str(a) for a in args])


def test_cli_gen_fit_predict(tmp_path):
    assert run_cli("gen-data", "--n", 60, "--seed", 2, "--out", tmp_path / "g") == 0
    data = tmp_path / "g" / "data.csv"
    rows = read_csv(data)
    assert len(rows) == 60 and list(rows[0]) == ["time", "value"]
    assert json.loads((tmp_path / "g" / "metrics.json").read_text())["schema_version"] == 1

    assert run_cli("fit", "--data", data, "--kernel", "matern32(len=3)", "--method", "spingp,kf", "--out", tmp_path / "f") == 0
    m = json.loads((tmp_path / "f" / "metrics.json").read_text())
    assert m["results"]["spingp"]["mll"] == pytest.approx(m["results"]["kf"]["mll"], rel=1e-6)
    assert {r["method"] for r in read_csv(tmp_path / "f" / "report.csv")} == {"spingp", "kf"}

    out = tmp_path / "p"
    assert run_cli("predict", "--data", data, "--kernel", "matern32(len=3)", "--method", "spingp", "--method", "dense", "--test-times", "0:70:15", "--out", out) == 0
    f = read_csv(out / "forecast.csv")
    assert list(f[0]) == ["time", "mean", "variance"] and len(f) == 15
    g = read_csv(out / "forecast_dense.csv")
    np.testing.assert_allclose([float(r["mean"]) for r in f], [float(r["mean"]) for r in g], atol=1e-6)


def test_cli_config_and_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_values = 30,60\nrepetitions = 1\nmethod = kf\n")
    assert run_cli("scaling-n", "--config", cfg, "--method", "spingp", "--out", tmp_path / "s") == 0
    rows = read_csv(tmp_path / "s" / "report.csv")
    assert [r["method"] for r in rows] == ["spingp", "spingp"]


def test_cli_partial_failure(tmp_path):
    # the dense baseline refuses N above its cap; the other cell still lands in the report
    out = tmp_path / "s"
    assert run_cli("scaling-n", "--method", "dense", "--n-values", "20,2500", "--repetitions", 1, "--out", out) == 1
    rows = read_csv(out / "report.csv")
    assert len(rows) == 2
    assert rows[0]["error"] == "" and "ValueError" in rows[1]["error"]
    assert json.loads((out / "metrics.json").read_text())["errors"] == 1


def test_cli_bad_config(tmp_path):
    assert run_cli("fit", "--kernel", "nonsense(", "--out", tmp_path) == 2
    assert run_cli("fit", "--method", "magic", "--out", tmp_path) == 2
    assert run_cli("fit", "--config", tmp_path / "absent.cfg", "--out", tmp_path) == 2
    assert run_cli("co2", "--out", tmp_path) == 2


def test_cli_co2_bad_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("# nothing\n")
    assert run_cli("co2", "--data", p, "--out", tmp_path / "o") == 1


def test_cli_fit_failure_exit(tmp_path):
    d = tmp_path / "d.csv"
    d.write_text("time,value\n0,1\n1,2\n2,1.5\n")
    assert run_cli("fit", "--data", d, "--kernel", "matern32(len=1e-300)", "--out", tmp_path / "f") == 1
    assert (tmp_path / "f" / "metrics.json").exists()
