"""Time the masked top-k retrieval kernel on both backends.

    python benchmarks/bench_kernels.py [--sizes 512 2048 8192] [--k 100] [--repeat 5]

Outputs of the two backends are compared for exact equality before any
timing is reported.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from ickd import _kernels


def _case(n, d, classes, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    queries = np.arange(min(n, 512))
    sims = x[queries] @ x.T
    return sims, labels, queries


def _time(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[512, 2048, 8192])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    before = _kernels.backend()
    print(f"{'bank':>6} {'side':>9} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    try:
        for n in args.sizes:
            sims, labels, queries = _case(n, args.dim, args.classes, n)
            for same in (True, False):
                _kernels.set_backend("numpy")
                ref = _kernels.masked_topk(sims, labels, queries, args.k, same)
                t_np = _time(lambda: _kernels.masked_topk(sims, labels, queries, args.k, same), args.repeat)
                t_nb = float("nan")
                if _kernels.HAVE_NUMBA:
                    _kernels.set_backend("numba")
                    got = _kernels.masked_topk(sims, labels, queries, args.k, same)
                    if not (np.array_equal(ref[0], got[0]) and np.array_equal(ref[1], got[1])):
                        raise SystemExit(f"backends disagree at n={n}, same_class={same}")
                    t_nb = _time(lambda: _kernels.masked_topk(sims, labels, queries, args.k, same), args.repeat)
                side = "positive" if same else "negative"
                print(f"{n:>6} {side:>9} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")
    finally:
        _kernels.set_backend(before)


if __name__ == "__main__":
    main()
