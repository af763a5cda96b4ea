"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median wall time of each backend and the
speed-up.  Shapes match the desk-scale BiLSTM and training batches.
"""

import argparse
import time

import numpy as np

from kdrank._kernels import NUMBA_KERNELS, NUMPY_KERNELS


def median_time(fn, repeat):
    fn()  # warm-up (also triggers numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    B, L, hd = 80, 20, 16
    gx = rng.normal(size=(B, L, 4 * hd))
    u = rng.normal(size=(hd, 4 * hd)) * 0.3
    lengths = rng.integers(1, L + 1, size=B)
    h, c, gates = NUMPY_KERNELS.lstm_forward(gx, u, lengths)
    dh = rng.normal(size=h.shape)
    src = rng.normal(size=(B * L, 32))
    index = rng.integers(0, 205, size=B * L)
    x = rng.normal(size=(B, L, 96))
    p, g = rng.normal(size=(205, 32)), rng.normal(size=(205, 32))
    return {
        "lstm_forward": lambda k: k.lstm_forward(gx, u, lengths),
        "lstm_backward": lambda k: k.lstm_backward(dh, u, c, gates, lengths),
        "scatter_add_rows": lambda k: k.scatter_add_rows(src, index, 205),
        "max_pool": lambda k: k.max_pool(x, lengths),
        "adam_update": lambda k: k.adam_update(p, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if NUMBA_KERNELS is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, call in cases(np.random.default_rng(0)).items():
        t_np = median_time(lambda: call(NUMPY_KERNELS), args.repeat)
        t_nb = median_time(lambda: call(NUMBA_KERNELS), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
