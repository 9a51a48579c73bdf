#!/usr/bin/env python3
"""Benchmark the numba and numpy convolution kernel paths.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times forward, input-gradient, and weight-gradient kernels at training-like
shapes, plus one full train step per backbone preset on each backend.
"""

import argparse
import time

import numpy as np

from cxrfusion import kernels
from cxrfusion.dataset import SynthConfig, generate
from cxrfusion.labels import UncertainPolicy
from cxrfusion.model import PRESETS, build_model
from cxrfusion.train import SGDMomentum, prepare_arrays, train_step

SHAPES = [
    # (label, n, c_in, h, w, c_out, k, stride)
    ("stage1 32x32", 32, 1, 34, 34, 8, 3, 2),
    ("stage2 16x16", 32, 8, 18, 18, 16, 3, 2),
    ("stage3 8x8", 32, 16, 10, 10, 32, 3, 2),
    ("res 8x8", 32, 16, 10, 10, 16, 3, 1),
]


def time_call(fn, repeats):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(repeats):
    print(f"{'shape':14s} {'kernel':8s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}")
    g = np.random.default_rng(0)
    for label, n, c_in, h, w, c_out, k, stride in SHAPES:
        xp = g.normal(size=(n, c_in, h, w))
        kern = g.normal(size=(c_out, c_in, k, k))
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        grad = g.normal(size=(n, c_out, ho, wo))
        calls = {
            "forward": lambda: kernels.conv2d_forward(xp, kern, stride),
            "grad_in": lambda: kernels.conv2d_grad_input(grad, kern, stride, xp.shape),
            "grad_w": lambda: kernels.conv2d_grad_weights(xp, grad, stride, kern.shape),
        }
        for name, fn in calls.items():
            with kernels.use_backend("numpy"):
                t_np = time_call(fn, repeats)
            row = f"{label:14s} {name:8s} {t_np * 1e3:9.3f}"
            if kernels._HAVE_NUMBA:
                with kernels.use_backend("numba"):
                    t_nb = time_call(fn, repeats)
                row += f" {t_nb * 1e3:9.3f} {t_np / t_nb:7.1f}x"
            else:
                row += "      n/a      n/a"
            print(row)


def bench_train_step(repeats):
    samples = generate(SynthConfig(n_patients=32, seed=0))
    batch = prepare_arrays(samples, None, UncertainPolicy.AS_NEGATIVE)
    print(f"\n{'preset':14s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}")
    for name, preset in PRESETS.items():
        times = {}
        for backend in ("numpy", "numba"):
            if backend == "numba" and not kernels._HAVE_NUMBA:
                continue
            with kernels.use_backend(backend):
                model = build_model(preset, None, seed=0)
                opt = SGDMomentum(model.param_list(), lr=1e-3)
                times[backend] = time_call(
                    lambda: train_step(model, batch, opt), repeats)
        row = f"{name:14s} {times['numpy'] * 1e3:9.1f}"
        if "numba" in times:
            row += (f" {times['numba'] * 1e3:9.1f}"
                    f" {times['numpy'] / times['numba']:7.1f}x")
        print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    print(f"active backend: {kernels.backend_name()} "
          f"(numba available: {kernels._HAVE_NUMBA})\n")
    bench_kernels(args.repeats)
    bench_train_step(max(3, args.repeats // 4))


if __name__ == "__main__":
    main()
