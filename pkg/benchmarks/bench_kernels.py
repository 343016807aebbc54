"""Compare the compiled and numpy pairwise-sum kernels.

    python3 benchmarks/bench_kernels.py [--sizes 128,512,2048] [--dim 16] [--reps 5]

Prints CSV: kernel,backend,n,dim,median_ms,speedup,max_rel_diff
"""

import argparse
import statistics
import sys
import time

import numpy as np

from sled import kernels


def _time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="128,512,2048")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    args = p.parse_args(argv)
    if not kernels.COMPILED_AVAILABLE:
        print("compiled kernels not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print("kernel,backend,n,dim,median_ms,speedup,max_rel_diff")
    cases = [
        ("distance_sum[beta=1]", lambda X, Y: kernels.distance_sum(X, Y, 1.0)),
        ("distance_sum[beta=1.5]", lambda X, Y: kernels.distance_sum(X, Y, 1.5)),
        ("rbf_sum", lambda X, Y: kernels.rbf_sum(X, Y, 1.0)),
        ("pairwise_distance", lambda X, Y: kernels.pairwise_distance(X, Y, 1.0)),
    ]
    previous = kernels.get_backend()
    try:
        for n in (int(s) for s in args.sizes.split(",")):
            X = rng.standard_normal((n, args.dim))
            Y = rng.standard_normal((n, args.dim)) + 0.5
            for name, fn in cases:
                result, ms = {}, {}
                for backend in ("python", "compiled"):
                    kernels.set_backend(backend)
                    result[backend] = np.asarray(fn(X, Y))
                    ms[backend] = _time(lambda: fn(X, Y), args.reps)
                a, b = result["python"], result["compiled"]
                diff = float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300)))
                for backend in ("python", "compiled"):
                    speed = ms["python"] / ms[backend]
                    print(f"{name},{backend},{n},{args.dim},{ms[backend]:.3f},{speed:.2f},{diff:.2e}")
    finally:
        kernels.set_backend(previous)
    return 0


if __name__ == "__main__":
    sys.exit(main())
