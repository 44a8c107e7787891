"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are imported from the package, so the comparison covers exactly
the code that training and data generation run. Outputs are checked for
agreement before anything is timed.
"""
import argparse
import math
import timeit

import numpy as np

from s2kd import data, spectral
from s2kd._accel import HAVE_NUMBA, USE_NUMBA


def fft_case(rows, n):
    rng = np.random.default_rng(0)
    x = np.ascontiguousarray(rng.normal(size=(rows, n)) + 1j * rng.normal(size=(rows, n)))
    return "fft", f"{rows}x{n}", (x,), spectral._fft_rows_numba, spectral._fft_rows_numpy


def step_case(size, vx, vy, kappa):
    rng = np.random.default_rng(1)
    u = rng.uniform(size=(size, size))
    n_sub = data.substeps(vx, vy, kappa)
    args = (u, vx, vy, kappa, 1.0 / n_sub, n_sub)
    return "advect_diffuse", f"{size}x{size} n_sub={n_sub}", args, data._step_numba, data._step_numpy


CASES = [
    fft_case(1024, 64),
    fft_case(64, 1024),
    fft_case(8, 8192),
    step_case(16, 0.4, -0.3, 0.1),
    step_case(64, 0.4, -0.3, 0.1),
    step_case(256, 0.4, -0.3, 0.1),
]


def best_of(fn, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    times = timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)
    return min(times) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if not (HAVE_NUMBA and USE_NUMBA):
        print("numba disabled (S2KD_DISABLE_NUMBA or not installed); the 'numba' column runs plain Python")
    print(f"{'kernel':<15} {'case':<22} {'numba (us)':>12} {'numpy (us)':>12} {'speedup':>8}")
    for name, label, call_args, fast, slow in CASES:
        a, b = fast(*call_args), slow(*call_args)
        if not np.allclose(a, b, rtol=1e-10, atol=1e-10):
            raise SystemExit(f"{name} {label}: kernels disagree")
        fast(*call_args)  # compile outside the timed region
        t_fast = best_of(fast, call_args, args.repeat)
        t_slow = best_of(slow, call_args, args.repeat)
        ratio = t_slow / t_fast if t_fast > 0 else math.inf
        print(f"{name:<15} {label:<22} {t_fast * 1e6:>12.1f} {t_slow * 1e6:>12.1f} {ratio:>7.2f}x")


if __name__ == "__main__":
    main()
