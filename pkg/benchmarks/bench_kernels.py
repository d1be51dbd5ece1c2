"""Time the compiled kernels against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5] [--seed 0]

Workloads mirror training-scale shapes: CTC forward-backward on a
[frames x classes] lattice with a medium-length target, and edit counts
on token sequences of hypothesis/reference length.
"""

import argparse
import time

import numpy as np

from basot.kernels import BACKEND, _pure

try:
    from basot.kernels import _ckernels
except ImportError:
    _ckernels = None


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def make_ctc_case(rng, T, C, L):
    logp = log_softmax_rows(rng.normal(0.0, 1.0, size=(T, C)))
    labels = rng.integers(1, C, size=L).astype(np.int64)
    return logp, labels


def make_edit_case(rng, n_hyp, n_ref, vocab):
    hyp = rng.integers(0, vocab, size=n_hyp).astype(np.int64)
    ref = rng.integers(0, vocab, size=n_ref).astype(np.int64)
    return hyp, ref


def time_fn(fn, cases, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for args in cases:
            fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cases", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    ctc_cases = [make_ctc_case(rng, T=48, C=20, L=16) for _ in range(args.cases)]
    edit_cases = [make_edit_case(rng, 40, 36, 20) for _ in range(args.cases)]

    rows = []
    for name, fn_pairs in (
        ("ctc_forward_backward", [("pure", _pure.ctc_forward_backward),
                                  ("cython", _ckernels.ctc_forward_backward if _ckernels else None)]),
        ("edit_counts", [("pure", _pure.edit_counts),
                         ("cython", _ckernels.edit_counts if _ckernels else None)]),
    ):
        cases = ctc_cases if name.startswith("ctc") else edit_cases
        times = {}
        for impl, fn in fn_pairs:
            times[impl] = time_fn(fn, cases, args.repeats) if fn else None
        rows.append((name, times))

    print(f"active backend: {BACKEND}   ({args.cases} calls per timing, best of {args.repeats})")
    print(f"{'kernel':24s} {'pure':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, times in rows:
        pure_ms = times["pure"] * 1e3
        if times["cython"] is None:
            print(f"{name:24s} {pure_ms:9.2f}ms {'n/a':>10s} {'n/a':>8s}")
        else:
            cy_ms = times["cython"] * 1e3
            print(f"{name:24s} {pure_ms:9.2f}ms {cy_ms:9.2f}ms {pure_ms / cy_ms:7.1f}x")


if __name__ == "__main__":
    main()
