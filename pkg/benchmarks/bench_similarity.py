#!/usr/bin/env python3
"""Benchmark the similarity scan kernels: numba @njit vs pure numpy.

The scan is the package's hot loop (every query scores every stored
record). Both kernels are timed on the same synthetic matrices and their
outputs cross-checked; the numba path is skipped automatically when
MATHLEARNER_DISABLE_NUMBA is set or numba is unavailable.

    python3 benchmarks/bench_similarity.py --records 200000 --dim 256
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mathlearner import similarity


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _time(fn, *args, repeats: int) -> tuple[float, np.ndarray]:
    fn(*args)  # warm up (and JIT-compile the numba path)
    best = float("inf")
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--records", type=int, default=100_000)
    parser.add_argument("--dim", type=int, default=256)
    parser.add_argument("--queries", type=int, default=20)
    parser.add_argument("--alpha", type=float, default=0.3)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(7)
    cat = _unit_rows(rng, args.records, args.dim)
    steps = _unit_rows(rng, args.records, args.dim)
    queries = _unit_rows(rng, args.queries, args.dim)

    def run_all(kernel):
        last = None
        for q in queries:
            last = kernel(cat, steps, q, q, args.alpha)
        return last

    rows = []
    numpy_time, numpy_out = _time(lambda: run_all(similarity.scan_scores_numpy), repeats=args.repeats)
    rows.append(("numpy", numpy_time))

    if similarity.HAS_NUMBA:
        numba_time, numba_out = _time(lambda: run_all(similarity.scan_scores_numba), repeats=args.repeats)
        rows.append(("numba", numba_time))
        np.testing.assert_allclose(numba_out, numpy_out, rtol=1e-10, atol=1e-12)
        assert int(np.argmax(numba_out)) == int(np.argmax(numpy_out))
    else:
        print("numba path inactive (flag set or numba missing); timing numpy only")

    per_query = args.records * args.queries
    print(f"\n{args.records} records x {args.dim} dims, {args.queries} queries, best of {args.repeats}:")
    for name, elapsed in rows:
        rate = per_query / elapsed / 1e6
        print(f"  {name:6s} {elapsed * 1e3:9.2f} ms   {rate:8.1f} M record-scores/s")
    if len(rows) == 2:
        print(f"  speedup numba/numpy: {rows[0][1] / rows[1][1]:.2f}x")


if __name__ == "__main__":
    main()
