"""Time the compiled kernels against the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints one row per
kernel and size with the best wall time of each backend, the speedup and the
largest absolute difference between the two outputs.
"""

import argparse
import time

import numpy as np

from metric_ensemble import kernels

CASES = {
    "chi2": lambda rng, n, d: (kernels.chi2_distances, rng.random((n, d)), rng.random((n, d))),
    "sqeuclid": lambda rng, n, d: (kernels.sq_euclidean_distances,
                                   rng.standard_normal((n, d)), rng.standard_normal((n, d))),
    "topk": lambda rng, n, d: (kernels.topk_smallest, rng.standard_normal((n, n)), 30),
}
SIZES = [(200, 64), (500, 256), (1000, 512)]


def best_time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def run(repeat=3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for name, make in CASES.items():
        for n, d in SIZES:
            fn, *args = make(rng, n, d)
            result = {}
            for backend in ("python", "compiled"):
                kernels.set_backend(backend)
                result[backend] = best_time(fn, args, repeat)
            diff = float(np.max(np.abs(np.asarray(result["python"][1], float)
                                       - np.asarray(result["compiled"][1], float))))
            tp, tc = result["python"][0], result["compiled"][0]
            rows.append((name, n, d, tp, tc, tp / tc, diff))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if "compiled" not in kernels.available_backends():
        raise SystemExit("compiled kernels are not built; nothing to compare")
    initial = kernels.get_backend()
    try:
        rows = run(args.repeat)
    finally:
        kernels.set_backend(initial)
    print("kernel\tn\td\tpython_s\tcompiled_s\tspeedup\tmax_abs_diff")
    for name, n, d, tp, tc, sp, diff in rows:
        print(f"{name}\t{n}\t{d}\t{tp:.4f}\t{tc:.4f}\t{sp:.2f}\t{diff:.1e}")


if __name__ == "__main__":
    main()
