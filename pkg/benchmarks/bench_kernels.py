"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under both backends; the script checks
that the outputs agree before reporting timings.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from evidential_grounding.kernels import backends


def _inputs(rng):
    n = 200_000
    nll = (rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 5, n),
           rng.uniform(1.1, 10, n), rng.uniform(0.1, 5, n))
    m = 2_000
    starts = rng.uniform(0, 0.9, m)
    ends = starts + rng.uniform(0.01, 0.3, m)
    nms = (starts, ends, rng.uniform(size=m), 0.7)
    kde = (rng.normal(size=5_000), np.linspace(-4, 4, 512), 0.2)
    hist = (rng.beta(0.5, 3.0, size=500_000), 64)
    return {"nig_nll_grad": nll, "nms_keep": nms, "gaussian_kde": kde, "histogram_cdf_map": hist}


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-12)


def run(repeat: int) -> dict:
    impls = backends()
    cases = _inputs(np.random.default_rng(0))
    results = {}
    for name, args in cases.items():
        ref = getattr(impls["python"], name)(*args)
        row = {}
        for backend, module in impls.items():
            fn = getattr(module, name)
            if not _same(fn(*args), ref):
                raise AssertionError(f"{name}: {backend} disagrees with the python backend")
            row[backend] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        results[name] = row
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", default=None, help="also write timings here")
    args = parser.parse_args(argv)
    results = run(args.repeat)
    print(f"{'kernel':<20}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, row in results.items():
        py = row["python"] * 1e3
        cy = row.get("cython")
        if cy is None:
            print(f"{name:<20}{py:>14.2f}{'n/a':>14}{'':>10}")
        else:
            print(f"{name:<20}{py:>14.2f}{cy * 1e3:>14.2f}{py / (cy * 1e3):>9.1f}x")
    if "cython" not in backends():
        print("compiled extension not built; only the fallback was timed", file=sys.stderr)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
