"""Compare the compiled kernels with the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--sizes 8,39,100]
"""

import argparse
import timeit

import numpy as np

from dcnv2 import _fallback

try:
    from dcnv2 import _kernels
except ImportError:
    _kernels = None


def bench(fn, *args, repeats=5):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.2:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeats)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sizes", default="8,39,100")
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'n':>5}{'python (s)':>14}{'cython (s)':>14}{'speedup':>10}")
    for n in (int(s) for s in args.sizes.split(",")):
        a = rng.standard_normal((n, n))
        x = rng.standard_normal(n)
        for name, args_ in (("jacobi_singular_values", (a, 1e-12, 60)), ("matvec", (a, x))):
            t_py = bench(getattr(_fallback, name), *args_, repeats=args.repeats)
            t_c = bench(getattr(_kernels, name), *args_, repeats=args.repeats)
            print(f"{name:<22}{n:>5}{t_py:>14.3e}{t_c:>14.3e}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
