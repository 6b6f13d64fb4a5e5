"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Sizes match what one training step and one SSIM sweep actually feed the
kernels. Compilation is excluded: every kernel runs once before timing.
"""
import argparse
import timeit

import numpy as np

from gradmask import _kernels


def cases(rng):
    x = rng.standard_normal((32, 8, 28, 28))
    cols = rng.standard_normal((8 * 9, 32 * 28 * 28))
    img = rng.uniform(0, 255, (28, 28))
    taps = np.ones(11) / 11
    stack = rng.standard_normal((10, 9194))
    stack[rng.random(stack.shape) < 0.4] = np.nan
    fallback = np.zeros(9194)
    key = np.uint64(_kernels.mix_key(0, 1, 2))
    return {
        "im2col 32x8x28x28 k3": lambda impl: impl.im2col(x, 3, 1),
        "col2im 32x8x28x28 k3": lambda impl: impl.col2im(cols, 32, 8, 28, 28, 3, 1),
        "filter_valid 28x28 w11": lambda impl: impl.filter_valid(img, taps),
        "counter_uniform 9194": lambda impl: impl.counter_uniform(key, 0, 9194),
        "nan_mean 10x9194": lambda impl: impl.nan_mean(stack, fallback),
        "nan_median 10x9194": lambda impl: impl.nan_median(stack, fallback),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = {"numpy": _kernels.numpy_impl, "numba": _kernels.numba_impl}
    if impls["numba"] is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  match")
    for name, fn in cases(rng).items():
        times, outs = {}, {}
        for label, impl in impls.items():
            outs[label] = fn(impl)  # warm-up / compile
            number = 3
            t = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat))
            times[label] = t / number * 1e3
        same = np.allclose(outs["numpy"], outs["numba"], rtol=1e-12, atol=1e-12, equal_nan=True)
        print(f"{name:26s} {times['numpy']:10.3f} {times['numba']:10.3f} "
              f"{times['numpy'] / times['numba']:7.1f}x  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()
