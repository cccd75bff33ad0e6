"""Time the compiled and pure-Python AR-DTW kernels on the same random paths.

    python benchmarks/bench_dtw.py [--pairs N] [--max-len L] [--dim D]
"""
import argparse
import time

import numpy as np

from semroute import kernels


def random_csr(rng, n_as, max_len, set_prob=0.1):
    elems = []
    for _ in range(int(rng.integers(1, max_len + 1))):
        size = int(rng.integers(2, 4)) if rng.random() < set_prob else 1
        elems.append(rng.choice(n_as, size, replace=False).tolist())
    idx = np.array([x for e in elems for x in e], dtype=np.int64)
    off = np.cumsum([0] + [len(e) for e in elems]).astype(np.int64)
    return idx, off


def bench(backend, E, pairs, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        total = 0.0
        for s, t in pairs:
            total += backend.ar_dtw_csr(E, *s, *t)
        best = min(best, time.perf_counter() - t0)
    return best, total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=5000)
    ap.add_argument("--max-len", type=int, default=8)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    E = rng.normal(size=(500, args.dim))
    pairs = [(random_csr(rng, 500, args.max_len), random_csr(rng, 500, args.max_len))
             for _ in range(args.pairs)]

    py_time, py_total = bench(kernels.python_kernels, E, pairs, args.repeat)
    print(f"python  {py_time:8.3f}s  {py_time / args.pairs * 1e6:9.1f} us/pair")
    if kernels.compiled_kernels is None:
        print("cython  not built (pip install -e . --no-build-isolation)")
        return
    cy_time, cy_total = bench(kernels.compiled_kernels, E, pairs, args.repeat)
    print(f"cython  {cy_time:8.3f}s  {cy_time / args.pairs * 1e6:9.1f} us/pair")
    print(f"speedup {py_time / cy_time:.1f}x, totals agree to {abs(py_total - cy_total):.2e}")


if __name__ == "__main__":
    main()
