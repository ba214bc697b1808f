# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  Same signatures and semantics as ``_pykernels``."""
from math import comb

import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, sqrt, M_PI, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


def balance_scores(labels, W, counts):
    cdef const signed char[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int8)
    cdef const double[:, ::1] w = np.ascontiguousarray(W, dtype=np.float64)
    cdef const long long[::1] cnt = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t R = lab.shape[0], G = lab.shape[1], L = w.shape[1]
    cdef Py_ssize_t c = cnt.shape[0]
    cdef Py_ssize_t r, j, l, a, b
    cdef double best, d, s
    out_arr = np.empty(R, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[:, ::1] sums = np.empty((c, L), dtype=np.float64)
    cdef double[::1] inv = np.empty(c, dtype=np.float64)
    for a in range(c):
        inv[a] = 1.0 / cnt[a]
    for r in range(R):
        for a in range(c):
            for l in range(L):
                sums[a, l] = 0.0
        for j in range(G):
            a = lab[r, j] - 1
            for l in range(L):
                sums[a, l] += w[j, l]
        best = 0.0
        for a in range(c):
            for b in range(a + 1, c):
                s = 0.0
                for l in range(L):
                    d = sums[a, l] * inv[a] - sums[b, l] * inv[b]
                    s += d * d
                if s > best:
                    best = s
        out[r] = best
    return out_arr


def pair_subset_scores(combos, Wpair, fixed_means, long g_i, long g_ref, double fixed_max):
    cdef const int[:, ::1] cb = np.ascontiguousarray(combos, dtype=np.int32)
    cdef const double[:, ::1] w = np.ascontiguousarray(Wpair, dtype=np.float64)
    cdef Py_ssize_t L = w.shape[1]
    cdef const double[:, ::1] fm = np.ascontiguousarray(
        np.asarray(fixed_means, dtype=np.float64).reshape(-1, L))
    cdef Py_ssize_t K = cb.shape[0], k = cb.shape[1], P = w.shape[0], F = fm.shape[0]
    cdef Py_ssize_t r, q, l, f
    cdef double best, si, di, dr, dd, ei, er
    cdef double[::1] total = np.zeros(L, dtype=np.float64)
    cdef double[::1] s = np.empty(L, dtype=np.float64)
    cdef double[::1] mi = np.empty(L, dtype=np.float64)
    cdef double[::1] mr = np.empty(L, dtype=np.float64)
    out_arr = np.empty(K, dtype=np.float64)
    cdef double[::1] out = out_arr
    for q in range(P):
        for l in range(L):
            total[l] += w[q, l]
    for r in range(K):
        for l in range(L):
            s[l] = 0.0
        for q in range(k):
            for l in range(L):
                s[l] += w[cb[r, q], l]
        dd = 0.0
        for l in range(L):
            mi[l] = s[l] / g_i
            mr[l] = (total[l] - s[l]) / g_ref
            si = mi[l] - mr[l]
            dd += si * si
        best = dd if dd > fixed_max else fixed_max
        for f in range(F):
            ei = 0.0
            er = 0.0
            for l in range(L):
                di = mi[l] - fm[f, l]
                dr = mr[l] - fm[f, l]
                ei += di * di
                er += dr * dr
            if ei > best:
                best = ei
            if er > best:
                best = er
        out[r] = best
    return out_arr


def subset_sums(combos, v):
    cdef const int[:, ::1] cb = np.ascontiguousarray(combos, dtype=np.int32)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t K = cb.shape[0], k = cb.shape[1], r, q
    cdef double s
    out_arr = np.empty(K, dtype=np.float64)
    cdef double[::1] out = out_arr
    for r in range(K):
        s = 0.0
        for q in range(k):
            s += vv[cb[r, q]]
        out[r] = s
    return out_arr


def arm_sums(labels, u, long n_arms):
    cdef const signed char[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int8)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t R = lab.shape[0], G = lab.shape[1], r, j, a
    out_arr = np.zeros((R, n_arms), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for r in range(R):
        for j in range(G):
            out[r, lab[r, j] - 1] += uu[j]
    return out_arr


def combinations(long n, long k):
    cdef long K = 1, i
    for i in range(k):
        K = K * (n - i) // (i + 1)
    out_arr = np.empty((K, k), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    cdef int *idx = <int *> malloc(max(k, 1) * sizeof(int))
    cdef long r, q, p
    for q in range(k):
        idx[q] = q
    try:
        for r in range(K):
            for q in range(k):
                out[r, q] = idx[q]
            # advance to the next combination in lexicographic order
            p = k - 1
            while p >= 0 and idx[p] == n - k + p:
                p -= 1
            if p < 0:
                break
            idx[p] += 1
            for q in range(p + 1, k):
                idx[q] = idx[q - 1] + 1
    finally:
        free(idx)
    return out_arr


def enumerate_labels(counts):
    """Multiset permutations in lexicographic order via the next-permutation step."""
    cnt = [int(x) for x in counts]
    cdef Py_ssize_t G = sum(cnt)
    cdef Py_ssize_t M = _multinomial(cnt)
    out_arr = np.empty((M, G), dtype=np.int8)
    cdef signed char[:, ::1] out = out_arr
    cdef signed char[::1] cur = np.repeat(np.arange(1, len(cnt) + 1, dtype=np.int8), cnt)
    cdef Py_ssize_t r, j, i, k2
    cdef signed char tmp
    for r in range(M):
        for j in range(G):
            out[r, j] = cur[j]
        i = G - 2
        while i >= 0 and cur[i] >= cur[i + 1]:
            i -= 1
        if i < 0:
            break
        k2 = G - 1
        while cur[k2] <= cur[i]:
            k2 -= 1
        tmp = cur[i]; cur[i] = cur[k2]; cur[k2] = tmp
        j = i + 1
        k2 = G - 1
        while j < k2:
            tmp = cur[j]; cur[j] = cur[k2]; cur[k2] = tmp
            j += 1
            k2 -= 1
    return out_arr


def _multinomial(cnt):
    total, rem = 1, sum(cnt)
    for g in cnt:
        total *= comb(rem, g)
        rem -= g
    return total


def profile_objective(double theta, XtX, Xty, double yty, S, t, m, double n_obs, bint reml):
    cdef const double[:, ::1] xtx = np.ascontiguousarray(XtX, dtype=np.float64)
    cdef const double[::1] xty = np.ascontiguousarray(Xty, dtype=np.float64)
    cdef const double[:, ::1] ss = np.ascontiguousarray(S, dtype=np.float64)
    cdef const double[::1] tt = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[::1] mm = np.ascontiguousarray(m, dtype=np.float64)
    return _profile(theta, xtx, xty, yty, ss, tt, mm, n_obs, reml)


cdef double _profile(double theta, const double[:, ::1] xtx, const double[::1] xty,
                     double yty, const double[:, ::1] ss, const double[::1] tt,
                     const double[::1] mm, double n_obs, bint reml) noexcept:
    cdef Py_ssize_t p = xtx.shape[0], G = ss.shape[0]
    cdef Py_ssize_t i, k, j
    cdef double *A = <double *> malloc(p * p * sizeof(double))
    cdef double *b = <double *> malloc(p * sizeof(double))
    cdef double wj, c, acc, logdet_a = 0.0, logdet_v = 0.0, rss, dof, s2, res
    if A == NULL or b == NULL:
        free(A); free(b)
        return INFINITY
    for i in range(p):
        b[i] = xty[i]
        for k in range(p):
            A[i * p + k] = xtx[i, k]
    c = yty
    for j in range(G):
        wj = theta / (1.0 + mm[j] * theta)
        logdet_v += log1p(mm[j] * theta)
        if wj == 0.0:
            continue
        c -= wj * tt[j] * tt[j]
        for i in range(p):
            b[i] -= wj * ss[j, i] * tt[j]
            acc = wj * ss[j, i]
            for k in range(i + 1):
                A[i * p + k] -= acc * ss[j, k]
    # in-place lower Cholesky, then forward solve for b
    for i in range(p):
        for k in range(i + 1):
            acc = A[i * p + k]
            for j in range(k):
                acc -= A[i * p + j] * A[k * p + j]
            if i == k:
                if acc <= 0.0:
                    free(A); free(b)
                    return INFINITY
                A[i * p + i] = sqrt(acc)
                logdet_a += 2.0 * log(A[i * p + i])
            else:
                A[i * p + k] = acc / A[k * p + k]
    rss = c
    for i in range(p):
        acc = b[i]
        for k in range(i):
            acc -= A[i * p + k] * b[k]
        b[i] = acc / A[i * p + i]
        rss -= b[i] * b[i]
    free(A); free(b)
    if not rss > 0.0:
        return INFINITY
    if reml:
        dof = n_obs - p
        s2 = rss / dof
        res = 0.5 * (dof * log(2.0 * M_PI * s2) + logdet_v + logdet_a + dof)
    else:
        s2 = rss / n_obs
        res = 0.5 * (n_obs * log(2.0 * M_PI * s2) + logdet_v + n_obs)
    return res
