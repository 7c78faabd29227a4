"""Compare the numba kernels with their pure-numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations are called directly, so the result does not depend on
VMFDINO_DISABLE_NUMBA. Each case is checked for agreement before timing;
numba compile time is excluded by a warm-up call.
"""

import argparse
import statistics
import time

import numpy as np

from vmfdino import _accel, kernels
from vmfdino.vmf import normalize


def bessel_case():
    args = [(nu, x) for nu in (0.0, 3.0, 127.0) for x in (1e-3, 1.0, 50.0, 500.0, 2000.0)]

    def run(fn):
        return [fn(nu, x)[0] for nu, x in args]

    return "log Bessel series (15 evals)", run, kernels._log_bessel_i_series_nb, kernels._log_bessel_i_series_np


def grouping_case(k=1024, p=32):
    rng = np.random.default_rng(0)
    centers = normalize(rng.standard_normal((64, p)))
    v = normalize(centers[rng.integers(0, 64, k)] + 0.1 * rng.standard_normal((k, p)))
    cos = np.ascontiguousarray(v @ v.T)

    def run(fn):
        return fn(cos, 0.9)[0]

    return f"greedy grouping (K={k})", run, kernels._greedy_groups_nb, kernels._greedy_groups_np


def knn_case(n_train=4000, n_test=1000, p=16, k=10):
    rng = np.random.default_rng(1)
    tr = normalize(rng.standard_normal((n_train, p)))
    te = normalize(rng.standard_normal((n_test, p)))
    labels = rng.integers(0, 10, n_train).astype(np.int64)
    sims = np.ascontiguousarray(te @ tr.T)

    def run(fn):
        return fn(sims, labels, k, 10)

    return f"kNN vote ({n_test}x{n_train}, k={k})", run, kernels._knn_predict_nb, kernels._knn_predict_np


def timed(run, fn, repeat):
    run(fn)  # warm-up, compiles the numba version
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run(fn)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<34}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, run, nb, np_ in (bessel_case(), grouping_case(), knn_case()):
        a, b = np.asarray(run(nb)), np.asarray(run(np_))
        if a.dtype.kind == "f":
            np.testing.assert_allclose(a, b, rtol=1e-13)
        else:
            np.testing.assert_array_equal(a, b)
        t_nb = timed(run, nb, args.repeat)
        t_np = timed(run, np_, args.repeat)
        print(f"{name:<34}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
