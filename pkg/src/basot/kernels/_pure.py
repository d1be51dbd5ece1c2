"""Pure-numpy fallback kernels.

Same contracts as the compiled module ``_ckernels``: both sides are tested
for exact agreement, and the dispatcher in ``__init__`` picks one at import.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

NEG_INF = -np.inf


def ctc_forward_backward(logp: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """CTC loss and gradient w.r.t. the log-prob lattice, in log space.

    logp: [T][C] log-probabilities, class 0 = blank.
    labels: [L] target class ids (no blanks).
    Returns (-log P(labels | lattice), d loss / d logp).
    """
    logp = np.asarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, C = logp.shape
    L = labels.shape[0]
    S = 2 * L + 1
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = labels
    # a skip s-2 -> s is legal when label s is neither blank nor a repeat
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    emit = logp[:, ext]  # [T][S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:][skip[2:]] = np.logaddexp(acc[2:][skip[2:]], prev[:-2][skip[2:]])
        alpha[t] = acc + emit[t]

    if S > 1:
        log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        # s -> s+2 is legal when skip[s+2]
        ok = skip[2:]
        acc[:-2][ok] = np.logaddexp(acc[:-2][ok], nxt[2:][ok])
        beta[t] = acc + emit[t]

    loss = -log_p
    # occupancy: alpha and beta both include the emission at t, divide it out once
    occ = np.exp(alpha + beta - emit - log_p)
    grad = np.zeros_like(logp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(loss), grad


def edit_counts(hyp: np.ndarray, ref: np.ndarray) -> Tuple[int, int, int]:
    """Minimal (substitutions, deletions, insertions) transforming ref into hyp.

    Backtrace prefers substitution over deletion over insertion on ties so
    the breakdown is deterministic.
    """
    hyp = np.asarray(hyp, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    n, m = hyp.shape[0], ref.shape[0]
    d = np.empty((n + 1, m + 1), dtype=np.int64)
    d[0, :] = np.arange(m + 1)
    d[:, 0] = np.arange(n + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        cost = (ref != hyp[i - 1]).astype(np.int64)
        base = np.empty(m + 1, dtype=np.int64)
        base[0] = i
        base[1:] = np.minimum(d[i - 1, :-1] + cost, d[i - 1, 1:] + 1)
        # deletion chain d[i][j-1]+1 resolves to a running minimum
        d[i] = np.minimum.accumulate(base - cols) + cols
    nsub = ndel = nins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            if hyp[i - 1] != ref[j - 1]:
                nsub += 1
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ndel += 1
            j -= 1
        else:
            nins += 1
            i -= 1
    return nsub, ndel, nins


def edit_cost(hyp: np.ndarray, ref: np.ndarray) -> int:
    """Total edit cost only (no backtrace)."""
    hyp = np.asarray(hyp, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    n, m = hyp.shape[0], ref.shape[0]
    if m == 0:
        return int(n)
    prev = np.arange(m + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        cost = (ref != hyp[i - 1]).astype(np.int64)
        base = np.empty(m + 1, dtype=np.int64)
        base[0] = i
        base[1:] = np.minimum(prev[:-1] + cost, prev[1:] + 1)
        prev = np.minimum.accumulate(base - cols) + cols
    return int(prev[m])
