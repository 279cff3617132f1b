"""Benchmark the numba kernels against the pure-numpy fallback.

Times the convolution and pooling kernels at the shapes the training loop
actually hits. The numba path includes a warmup call so jit compilation is
not billed to the timings.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from xdg import _kernels_numpy
from xdg.backend import HAS_NUMBA

if HAS_NUMBA:
    from xdg import _kernels_numba

SHAPES = [
    # (label, B, C, K, H, kernel)
    ("digits conv1", 32, 2, 16, 28, 3),
    ("digits conv2", 32, 16, 16, 14, 3),
    ("glyphs conv", 90, 8, 8, 16, 3),
    ("adapter 1x1", 32, 16, 16, 7, 1),
]


def time_fn(fn, *args, repeats=20):
    fn(*args)  # warmup / jit
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats * 1000.0


def bench(repeats):
    rng = np.random.default_rng(0)
    header = f"{'case':24s} {'kernel':12s} {'numpy ms':>9s}"
    if HAS_NUMBA:
        header += f" {'numba ms':>9s} {'speedup':>8s}"
    print(header)
    for label, B, C, K, H, kw in SHAPES:
        x = rng.normal(size=(B, C, H + 2 * (kw // 2), H + 2 * (kw // 2)))
        w = rng.normal(size=(K, C, kw, kw))
        b = np.zeros(K)
        ho = x.shape[2] - kw + 1
        g = rng.normal(size=(B, K, ho, ho))
        cases = [
            ("forward", _kernels_numpy.conv2d_forward, (x, w, b, 1)),
            ("bwd input", _kernels_numpy.conv2d_backward_input, (g, w, x.shape[2], x.shape[3], 1)),
            ("bwd kernel", _kernels_numpy.conv2d_backward_kernel, (g, x, kw, kw, 1)),
        ]
        for name, np_fn, args in cases:
            t_np = time_fn(np_fn, *args, repeats=repeats)
            line = f"{label:24s} {name:12s} {t_np:9.3f}"
            if HAS_NUMBA:
                nb_fn = getattr(_kernels_numba, np_fn.__name__)
                t_nb = time_fn(nb_fn, *args, repeats=repeats)
                line += f" {t_nb:9.3f} {t_np / t_nb:7.1f}x"
            print(line)
    x = rng.normal(size=(32, 16, 28, 28))
    t_np = time_fn(_kernels_numpy.maxpool2_forward, x, repeats=repeats)
    line = f"{'maxpool 28px':24s} {'forward':12s} {t_np:9.3f}"
    if HAS_NUMBA:
        t_nb = time_fn(_kernels_numba.maxpool2_forward, x, repeats=repeats)
        line += f" {t_nb:9.3f} {t_np / t_nb:7.1f}x"
    print(line)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    bench(parser.parse_args().repeats)
