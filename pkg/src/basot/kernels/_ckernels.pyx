# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: CTC forward-backward and Levenshtein counts.

Mirrors basot.kernels._pure exactly; the test suite asserts agreement.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()

cdef double NEG_INF = -float("inf")


cdef inline double logaddexp2(double a, double b) noexcept:
    cdef double t
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        t = a
        a = b
        b = t
    return a + log1p(exp(b - a))


def ctc_forward_backward(object logp_in, object labels_in):
    """CTC loss and gradient w.r.t. the log-prob lattice (class 0 = blank)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] logp = np.ascontiguousarray(logp_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] labels = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t L = labels.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ext = np.zeros(S, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] skip = np.zeros(S, dtype=np.uint8)
    cdef Py_ssize_t s, t
    for s in range(L):
        ext[2 * s + 1] = labels[s]
    for s in range(2, S):
        if ext[s] != 0 and ext[s] != ext[s - 2]:
            skip[s] = 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((T, S), NEG_INF)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((T, S), NEG_INF)
    cdef double acc, log_p

    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = logaddexp2(acc, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                acc = logaddexp2(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logp[t, ext[s]]

    if S > 1:
        log_p = logaddexp2(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]

    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s]
            if s + 1 < S:
                acc = logaddexp2(acc, beta[t + 1, s + 1])
            if s + 2 < S and skip[s + 2]:
                acc = logaddexp2(acc, beta[t + 1, s + 2])
            beta[t, s] = acc + logp[t, ext[s]]

    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros_like(logp)
    cdef double g
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - logp[t, ext[s]] - log_p
            if g != NEG_INF:
                grad[t, ext[s]] -= exp(g)
    return float(-log_p), grad


def edit_counts(object hyp_in, object ref_in):
    """Minimal (sub, del, ins) transforming ref into hyp; sub > del > ins on ties."""
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hyp = np.ascontiguousarray(hyp_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ref = np.ascontiguousarray(ref_in, dtype=np.int64)
    cdef Py_ssize_t n = hyp.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] d = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef long long best, cand
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        d[i, 0] = i
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1)
            cand = d[i, j - 1] + 1
            if cand < best:
                best = cand
            cand = d[i - 1, j] + 1
            if cand < best:
                best = cand
            d[i, j] = best
    cdef long long nsub = 0, ndel = 0, nins = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1):
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
    return int(nsub), int(ndel), int(nins)


def edit_cost(object hyp_in, object ref_in):
    """Total edit cost only."""
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hyp = np.ascontiguousarray(hyp_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ref = np.ascontiguousarray(ref_in, dtype=np.int64)
    cdef Py_ssize_t n = hyp.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev = np.arange(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur = np.empty(m + 1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef long long best, cand
    if m == 0:
        return int(n)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1)
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cand = prev[j] + 1
            if cand < best:
                best = cand
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])
