"""Benchmark the compiled LCS kernel against the pure-Python fallback.

The longest-common-run dynamic program is the one scalar hot loop in the
toolkit (it runs once per candidate pair during triplet mining and once per
retrieved context during eval filtering). Everything else is library-backed
matrix math where a compiled kernel would buy nothing.

Usage: python benchmarks/bench_lcs.py [--pairs 200] [--target-len 64] [--ctx-len 512]
"""

import argparse
import time

import numpy as np

from delm import _kernels


def run(pairs: int, target_len: int, ctx_len: int, vocab: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    data = [(rng.integers(4, vocab, target_len).astype(np.int64),
             rng.integers(4, vocab, ctx_len).astype(np.int64))
            for _ in range(pairs)]

    def time_impl(fn):
        times = []
        for a, b in data[: min(5, pairs)]:
            fn(a, b)  # warmup
        t0 = time.perf_counter()
        results = []
        for a, b in data:
            results.append(fn(a, b))
        return time.perf_counter() - t0, results

    pure_s, pure_out = time_impl(_kernels.lcs_run_pure)
    print(f"pure python : {pure_s * 1e3:9.1f} ms total "
          f"({pure_s / pairs * 1e6:8.1f} us/pair)")
    if not _kernels.HAVE_COMPILED:
        print("compiled    : not built (install with a C compiler to compare)")
        return
    comp_s, comp_out = time_impl(_kernels.lcs_run_compiled)
    print(f"compiled    : {comp_s * 1e3:9.1f} ms total "
          f"({comp_s / pairs * 1e6:8.1f} us/pair)")
    assert pure_out == comp_out, "implementations disagree"
    print(f"speedup     : {pure_s / comp_s:9.1f} x (outputs identical on "
          f"{pairs} pairs)")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--target-len", type=int, default=64)
    ap.add_argument("--ctx-len", type=int, default=512)
    ap.add_argument("--vocab", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run(args.pairs, args.target_len, args.ctx_len, args.vocab, args.seed)
