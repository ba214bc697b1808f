"""Pure numpy implementations of the hot loops.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and semantics.  Labels are 1-based ``int8``.
"""
import itertools

import numpy as np

_CHUNK = 8192


def balance_scores(labels, W, counts):
    """Max pairwise squared distance between arm means of the rows of ``W``."""
    labels = np.asarray(labels, dtype=np.int8)
    W = np.asarray(W, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    R, c = labels.shape[0], counts.shape[0]
    out = np.empty(R)
    for lo in range(0, R, _CHUNK):
        lab = labels[lo:lo + _CHUNK]
        means = [((lab == a + 1).astype(np.float64) @ W) / counts[a] for a in range(c)]
        best = np.zeros(lab.shape[0])
        for a in range(c):
            for b in range(a + 1, c):
                d = means[a] - means[b]
                np.maximum(best, np.einsum("rl,rl->r", d, d), out=best)
        out[lo:lo + _CHUNK] = best
    return out


def pair_subset_scores(combos, Wpair, fixed_means, g_i, g_ref, fixed_max):
    """Balance scores when only two arms are re-drawn among a fixed pool of clusters.

    ``combos`` holds, per candidate, the pool positions assigned to arm i; the
    rest of the pool goes to the reference arm.  ``fixed_means`` are the means
    of the untouched arms and ``fixed_max`` their own largest pairwise distance.
    """
    combos = np.asarray(combos)
    Wpair = np.asarray(Wpair, dtype=np.float64)
    fixed_means = np.asarray(fixed_means, dtype=np.float64).reshape(-1, Wpair.shape[1])
    total = Wpair.sum(axis=0)
    out = np.empty(combos.shape[0])
    for lo in range(0, combos.shape[0], _CHUNK):
        s = Wpair[combos[lo:lo + _CHUNK]].sum(axis=1)
        mi = s / g_i
        mr = (total - s) / g_ref
        d = mi - mr
        best = np.maximum(np.einsum("rl,rl->r", d, d), fixed_max)
        for f in fixed_means:
            di = mi - f
            dr = mr - f
            np.maximum(best, np.einsum("rl,rl->r", di, di), out=best)
            np.maximum(best, np.einsum("rl,rl->r", dr, dr), out=best)
        out[lo:lo + _CHUNK] = best
    return out


def subset_sums(combos, v):
    """Row sums of ``v`` gathered at each row of ``combos``."""
    v = np.asarray(v, dtype=np.float64)
    return v[np.asarray(combos)].sum(axis=1)


def arm_sums(labels, u, n_arms):
    """R x c matrix of per-arm totals of ``u`` for every label row."""
    labels = np.asarray(labels, dtype=np.int8)
    u = np.asarray(u, dtype=np.float64)
    out = np.empty((labels.shape[0], n_arms))
    for a in range(n_arms):
        out[:, a] = (labels == a + 1) @ u
    return out


def combinations(n, k):
    """All k-subsets of range(n) in lexicographic order (K x k, int32)."""
    K = 1
    for i in range(k):
        K = K * (n - i) // (i + 1)
    flat = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n), k)),
                       dtype=np.int32, count=K * k)
    return flat.reshape(K, k)


def enumerate_labels(counts):
    """Every label vector with ``counts[a]`` copies of arm a+1, lexicographically sorted."""
    counts = [int(x) for x in counts]
    G = sum(counts)
    rows = np.zeros((1, G), dtype=np.int8)
    free = np.ones((1, G), dtype=bool)
    n_free = G
    # Place arms 1..c-1 one at a time into the still-free positions.
    for a, g in enumerate(counts[:-1], start=1):
        combos = combinations(n_free, g)
        K = combos.shape[0]
        pos = np.nonzero(free)[1].reshape(rows.shape[0], n_free)
        chosen = np.take_along_axis(np.repeat(pos, K, axis=0),
                                    np.tile(combos, (pos.shape[0], 1)), axis=1)
        rows = np.repeat(rows, K, axis=0)
        free = np.repeat(free, K, axis=0)
        r = np.arange(rows.shape[0])[:, None]
        rows[r, chosen] = a
        free[r, chosen] = False
        n_free -= g
    rows[free] = len(counts)
    order = np.lexsort(rows.T[::-1])
    return np.ascontiguousarray(rows[order])


def profile_objective(theta, XtX, Xty, yty, S, t, m, n_obs, reml):
    """Negative profiled (restricted) log-likelihood at variance ratio ``theta``.

    Returns ``inf`` when the GLS cross-product matrix is not positive definite.
    """
    w = theta / (1.0 + m * theta)
    A = XtX - (S * w[:, None]).T @ S
    b = Xty - S.T @ (w * t)
    c = yty - np.dot(w, t * t)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.inf
    z = np.linalg.solve(L, b)
    rss = c - z @ z
    if not rss > 0:
        return np.inf
    logdet_v = np.sum(np.log1p(m * theta))
    p = XtX.shape[0]
    if reml:
        dof = n_obs - p
        s2 = rss / dof
        return 0.5 * (dof * np.log(2 * np.pi * s2) + logdet_v
                      + 2 * np.sum(np.log(np.diag(L))) + dof)
    s2 = rss / n_obs
    return 0.5 * (n_obs * np.log(2 * np.pi * s2) + logdet_v + n_obs)
