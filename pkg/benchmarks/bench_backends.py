"""numba vs numpy block kernels, plus one end-to-end MLL+gradient per backend.

    python3 benchmarks/bench_backends.py [--n 2000] [--b 2,4,8,12] [--repetitions 5] [--out bench.csv]

Prints a table of median seconds and the numpy/numba ratio. The numba column
includes no compilation time: every cell runs once before timing.
"""
import argparse
import csv
import sys

import numpy as np

from spingp import available_backends, btd, generate_sinusoid_data, mll_and_gradient
from spingp.experiments import kernel_for_block_size, time_call


def random_spd_btd(n, b, rng):
    diag = rng.standard_normal((n, b, b))
    diag = diag @ np.swapaxes(diag, 1, 2) + 4 * b * np.eye(b)
    upper = rng.standard_normal((n - 1, b, b))
    return btd.SymBTD(diag, upper)


def cells(n, b, rng):
    m = random_spd_btd(n, b, rng)
    rhs = rng.standard_normal(n * b)
    data = generate_sinusoid_data(n, 0)
    kernel = kernel_for_block_size(b)

    def factor(be):
        return lambda: btd.factorize(m, be)

    def solve(be):
        f = btd.factorize(m, be)
        return lambda: btd.solve(f, rhs)

    def selinv(be):
        f = btd.factorize(m, be)
        return lambda: btd.selective_inverse(f)

    def cr(be):
        return lambda: btd.cr_solve(m, rhs, threads=1, backend=be)

    def mll(be):
        return lambda: mll_and_gradient(data, kernel, None, 0.04, backend=be)

    return {"factorize": factor, "solve": solve, "selective_inverse": selinv, "cr_solve": cr, "mll_and_gradient": mll}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--b", default="2,4,8,12")
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional CSV path")
    args = ap.parse_args(argv)
    backends = available_backends()
    if "numba" not in backends:
        print("numba is not importable; only the numpy backend can be timed", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    rows = []
    for b in (int(x) for x in args.b.split(",")):
        for op, make in cells(args.n, b, rng).items():
            row = {"op": op, "n": args.n, "b": b}
            for be in backends:
                row[be], _ = time_call(make(be), args.repetitions)
            row["ratio"] = row["numpy"] / row["numba"] if "numba" in row else float("nan")
            rows.append(row)
            print(f"{op:18s} b={b:<3d} " + "  ".join(f"{be}={row[be]:.2e}s" for be in backends) + f"  numpy/numba={row['ratio']:.1f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["op", "n", "b", *backends, "ratio"])
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
