"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``.

Same algorithm, same floating-point operation order, so both backends give
identical merge sequences and enrichment scores.
"""
from __future__ import annotations

import numpy as np


def _rescan(d, node, active, nn, mind, k):
    cand = active & (node > node[k])
    cand[k] = False
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        nn[k] = -1
        mind[k] = np.inf
        return
    vals = d[k, idx]
    best = vals.min()
    tied = idx[vals == best]
    # smallest node id among tied candidates
    j = tied[np.argmin(node[tied])]
    nn[k] = j
    mind[k] = best


def ward_linkage(condensed: np.ndarray, n: int):
    d = np.zeros((n, n), dtype=np.float64)
    if n > 1:
        iu = np.triu_indices(n, k=1)
        d[iu] = condensed
        d[(iu[1], iu[0])] = condensed
    node = np.arange(n, dtype=np.int64)
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    nn = np.full(n, -1, dtype=np.int64)
    mind = np.full(n, np.inf)

    m = max(n - 1, 0)
    left = np.empty(m, dtype=np.int64)
    right = np.empty(m, dtype=np.int64)
    height = np.empty(m, dtype=np.float64)
    sizes = np.empty(m, dtype=np.int64)

    for i in range(n):
        _rescan(d, node, active, nn, mind, i)

    for step in range(m):
        rows = np.flatnonzero(active & (nn >= 0))
        rv = mind[rows]
        bestd = rv.min()
        tied = rows[rv == bestd]
        # lexicographic (left id, right id) among tied rows
        order = np.lexsort((node[nn[tied]], node[tied]))
        a = tied[order[0]]
        b = nn[a]

        left[step] = node[a]
        right[step] = node[b]
        height[step] = bestd
        na, nb = size[a], size[b]
        sizes[step] = int(na + nb)

        others = np.flatnonzero(active)
        others = others[(others != a) & (others != b)]
        nk = size[others]
        dnew = ((na + nk) * d[a, others] + (nb + nk) * d[b, others]
                - nk * bestd) / (na + nb + nk)
        d[a, others] = dnew
        d[others, a] = dnew

        active[b] = False
        node[a] = n + step
        size[a] = na + nb
        nn[a] = -1
        mind[a] = np.inf

        for k in others:
            if nn[k] == a or nn[k] == b:
                _rescan(d, node, active, nn, mind, k)
            elif d[a, k] < mind[k]:
                mind[k] = d[a, k]
                nn[k] = a

    return left, right, height, sizes


def es_from_positions(positions: np.ndarray, n_total: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    s = positions.shape[1]
    miss_w = n_total - s
    # running sum in units of 1 / (s * (N - s)), exact in integers
    i = np.arange(s, dtype=np.int64)
    before = i * miss_w - (positions - i) * s
    after = before + miss_w
    top = np.maximum(after.max(axis=1), 0)
    bottom = np.minimum(before.min(axis=1), 0)
    return np.where(top >= -bottom, top, bottom).astype(np.float64) / float(s * miss_w)
