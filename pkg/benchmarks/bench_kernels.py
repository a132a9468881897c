"""Time the numba kernels against the numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so CLFT_DISABLE_NUMBA does not matter here.
The first numba call (JIT compile) is excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from clft import _kernels as K


def _logp(rng, T, C):
    z = rng.normal(size=(T, C))
    return z - np.log(np.exp(z).sum(1, keepdims=True))


def cases(rng):
    yield "ctc T=50 C=9 |y|=12", "ctc", (_logp(rng, 50, 9), rng.integers(1, 9, 12))
    yield "ctc T=200 C=9 |y|=40", "ctc", (_logp(rng, 200, 9), rng.integers(1, 9, 40))
    yield "edit 15x15", "edit", (rng.integers(0, 8, 15), rng.integers(0, 8, 15))
    yield "edit 200x200", "edit", (rng.integers(0, 8, 200), rng.integers(0, 8, 200))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, kind, inputs in cases(rng):
        if kind == "ctc":
            slow = lambda: K.ctc_forward_backward_numpy(*inputs)  # noqa: E731
            fast = (lambda: K.ctc_forward_backward_numba(*inputs, 0)) if K.HAVE_NUMBA else None  # noqa: E731
        else:
            slow = lambda: K.edit_distance_python(*inputs)  # noqa: E731
            fast = (lambda: K.edit_distance_numba(*inputs)) if K.HAVE_NUMBA else None  # noqa: E731
        n = 20
        t_slow = min(timeit.repeat(slow, number=n, repeat=args.repeat)) / n * 1e3
        if fast is None:
            print(f"{name:<24}{t_slow:>12.3f}{'-':>12}{'-':>10}")
            continue
        fast()  # compile
        t_fast = min(timeit.repeat(fast, number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:<24}{t_slow:>12.3f}{t_fast:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
