"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--sizes 16 32 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from mmgl import _ext


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_jacobi(impl, m, repeat):
    def run():
        a, v = m.copy(), np.eye(len(m))
        impl.jacobi_sweeps(a, v, 1e-15 * np.linalg.norm(m), 100)
    return best_of(run, repeat)


def bench_lcs(impl, x, y, repeat):
    return best_of(lambda: impl.lcs_length(x, y), repeat)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="*", default=[16, 32, 64])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _ext.compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'n':>5} {'compiled s':>12} {'python s':>12} {'speedup':>8}")
    for n in args.sizes:
        a = rng.standard_normal((n, n))
        m = (a + a.T) / 2
        c = bench_jacobi(_ext.compiled, m, args.repeat)
        py = bench_jacobi(_ext.python, m, args.repeat)
        print(f"{'jacobi':<10} {n:>5} {c:>12.5f} {py:>12.5f} {py / c:>7.1f}x")
    for n in (s * 4 for s in args.sizes):
        x = rng.integers(0, 20, size=n)
        y = rng.integers(0, 20, size=n)
        c = bench_lcs(_ext.compiled, x, y, args.repeat)
        py = bench_lcs(_ext.python, x, y, args.repeat)
        print(f"{'lcs':<10} {n:>5} {c:>12.6f} {py:>12.6f} {py / c:>7.1f}x")


if __name__ == "__main__":
    main()
