"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--curves 400] [--paths 20000]

Both backends run on identical inputs; the script also reports the largest
difference between their outputs.
"""
import argparse
import statistics
import time

import numpy as np

from relsn import _backend
from relsn.pivotal import BRIDGE_CORRECTION
from relsn.simulate import DgpConfig, generate_sample
from relsn.spline_core import SplineSpec, curve_moments


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), statistics.median(times), out


def max_diff(a, b):
    return max(float(np.nanmax(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--curves", type=int, default=400)
    parser.add_argument("--knots", type=int, default=6)
    parser.add_argument("--paths", type=int, default=20_000)
    parser.add_argument("--steps", type=int, default=2000)
    args = parser.parse_args(argv)

    if _backend.compiled_kernels is None:
        raise SystemExit("the compiled extension is not built; run: pip install -e . --no-build-isolation")

    sample = generate_sample(DgpConfig(args.curves, "S3", seed=1))
    gband, rhs = curve_moments(sample, SplineSpec(4, args.knots))
    first = max(1, args.curves // 10)
    inc = np.random.default_rng(2).standard_normal((args.paths, args.steps)) / np.sqrt(args.steps)
    corr = BRIDGE_CORRECTION / np.sqrt(args.steps)

    cases = [
        ("prefix_solve", f"{args.curves} curves, {args.knots + 4} coefficients",
         lambda k: k.prefix_solve(gband, rhs, first)),
        ("bridge_functionals", f"{args.paths} paths x {args.steps} steps",
         lambda k: k.bridge_functionals(inc, args.steps // 10, corr)),
    ]
    print(f"{'kernel':<20}{'size':<32}{'python (s)':>12}{'compiled (s)':>14}{'speedup':>10}{'max diff':>11}")
    for name, size, call in cases:
        py_best, _, py_out = best_of(lambda: call(_backend.python_kernels), args.repeat)
        c_best, _, c_out = best_of(lambda: call(_backend.compiled_kernels), args.repeat)
        if name == "prefix_solve":
            py_out, c_out = py_out[:1], c_out[:1]
        print(f"{name:<20}{size:<32}{py_best:>12.4f}{c_best:>14.4f}{py_best / c_best:>9.1f}x"
              f"{max_diff(py_out, c_out):>11.1e}")


if __name__ == "__main__":
    main()
