"""Benchmark the compiled kernels against the pure-Python fallback.

Times the two hot kernels in isolation and the end-to-end paths that
dominate the Monte-Carlo studies (a calibrated one-stage fit and a full
bootstrap).  The end-to-end comparison swaps the backend functions on
`dtrcal.kernels`, which is how the rest of the package resolves them.

    python benchmarks/bench_kernels.py --n 2000 --bootstrap 200
"""

import argparse
import time

import numpy as np

from dtrcal import kernels, simlab
from dtrcal.inference import bootstrap
from dtrcal.kernels import pykernels
from dtrcal.qlearning import fit_qlearning

try:
    from dtrcal.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(n, repeats):
    rng = np.random.default_rng(0)
    x = np.ascontiguousarray(rng.normal(size=(n, 7)))
    y = np.ascontiguousarray(rng.normal(size=n))
    w = rng.normal(1, 1, (n, 1, 3))
    w[rng.random(n) < 0.8, 0, 2] = np.nan
    w = np.ascontiguousarray(w)
    z = np.ascontiguousarray(rng.normal(size=(n, 1)))

    rows = []
    backends = [("python", pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    for name, impl in backends:
        rows.append((f"ols_solve ({n}x7)", name,
                     timeit(lambda: impl.ols_solve(x, y), repeats)))
        rows.append((f"calib_moments ({n}x1x3)", name,
                     timeit(lambda: impl.calib_moments(w, z), repeats)))
    return rows


def bench_end_to_end(n, b, repeats):
    cohort = simlab.simulate_cohort(simlab.one_stage_config(n=n, sigma=0.9), seed=1)
    specs = simlab.one_stage_design()

    rows = []
    backends = [("python", pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    saved = (kernels.ols_solve, kernels.calib_moments)
    try:
        for name, impl in backends:
            kernels.ols_solve = impl.ols_solve
            kernels.calib_moments = impl.calib_moments
            rows.append((f"calibrated fit (n={n})", name,
                         timeit(lambda: fit_qlearning(cohort, specs, "calibrated"), repeats)))
            rows.append((f"calibrated bootstrap (b={b})", name,
                         timeit(lambda: bootstrap(cohort, specs, "calibrated", b, seed=3), 1)))
    finally:
        kernels.ols_solve, kernels.calib_moments = saved
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=2000)
    parser.add_argument("--bootstrap", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if _ckernels is None:
        print("compiled kernels not available; timing the fallback only")

    rows = bench_kernels(args.n, args.repeats) + bench_end_to_end(args.n, args.bootstrap, args.repeats)
    by_case = {}
    for case, backend, seconds in rows:
        by_case.setdefault(case, {})[backend] = seconds

    width = max(len(c) for c in by_case)
    print(f"{'case':<{width}}  {'python':>12}  {'compiled':>12}  {'speedup':>8}")
    for case, results in by_case.items():
        py = results.get("python", float("nan"))
        cc = results.get("compiled", float("nan"))
        speedup = py / cc if cc == cc and cc > 0 else float("nan")
        print(f"{case:<{width}}  {py * 1e3:>10.3f}ms  {cc * 1e3:>10.3f}ms  {speedup:>7.2f}x")


if __name__ == "__main__":
    main()
