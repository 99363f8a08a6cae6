# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: Ward.D agglomeration and batched enrichment scores.

Both functions have bit-identical pure-Python twins in ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline Py_ssize_t _cidx(Py_ssize_t i, Py_ssize_t j, Py_ssize_t n) nogil:
    # condensed index of (i, j) with i < j
    return n * i - (i * (i + 1)) // 2 + (j - i - 1)


cdef inline double _get(double[::1] d, Py_ssize_t i, Py_ssize_t j, Py_ssize_t n) nogil:
    if i < j:
        return d[_cidx(i, j, n)]
    return d[_cidx(j, i, n)]


cdef inline void _set(double[::1] d, Py_ssize_t i, Py_ssize_t j, Py_ssize_t n, double v) nogil:
    if i < j:
        d[_cidx(i, j, n)] = v
    else:
        d[_cidx(j, i, n)] = v


def ward_linkage(double[::1] condensed, Py_ssize_t n):
    """Ward.D agglomeration on a condensed dissimilarity vector (copied).

    Returns ``(left, right, height, size)`` arrays of length ``n - 1``; node
    ids follow the leaves-then-merges numbering (merge ``s`` creates ``n + s``).
    """
    cdef double[::1] d = np.array(condensed, dtype=np.float64, copy=True)
    cdef cnp.int64_t[::1] node = np.arange(n, dtype=np.int64)
    cdef double[::1] size = np.ones(n, dtype=np.float64)
    cdef cnp.uint8_t[::1] active = np.ones(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] nn = np.full(n, -1, dtype=np.int64)
    cdef double[::1] mind = np.full(n, INFINITY, dtype=np.float64)

    left_out = np.empty(max(n - 1, 0), dtype=np.int64)
    right_out = np.empty(max(n - 1, 0), dtype=np.int64)
    height_out = np.empty(max(n - 1, 0), dtype=np.float64)
    size_out = np.empty(max(n - 1, 0), dtype=np.int64)
    cdef cnp.int64_t[::1] lo = left_out
    cdef cnp.int64_t[::1] ro = right_out
    cdef double[::1] ho = height_out
    cdef cnp.int64_t[::1] so = size_out

    cdef Py_ssize_t i, j, k, step, a, b, best
    cdef double v, bestd, dab, na, nb, nk, dnew
    cdef cnp.int64_t bi, bj

    with nogil:
        for i in range(n):
            _rescan(d, node, active, nn, mind, i, n)

        for step in range(n - 1):
            best = -1
            bestd = INFINITY
            bi = 0
            bj = 0
            for i in range(n):
                if not active[i] or nn[i] < 0:
                    continue
                v = mind[i]
                if (best < 0 or v < bestd
                        or (v == bestd and (node[i] < bi
                                            or (node[i] == bi and node[nn[i]] < bj)))):
                    best = i
                    bestd = v
                    bi = node[i]
                    bj = node[nn[i]]
            a = best
            b = nn[best]

            lo[step] = node[a]
            ro[step] = node[b]
            ho[step] = bestd
            na = size[a]
            nb = size[b]
            so[step] = <cnp.int64_t>(na + nb)
            dab = bestd

            for k in range(n):
                if not active[k] or k == a or k == b:
                    continue
                nk = size[k]
                dnew = ((na + nk) * _get(d, a, k, n) + (nb + nk) * _get(d, b, k, n)
                        - nk * dab) / (na + nb + nk)
                _set(d, a, k, n, dnew)

            active[b] = 0
            node[a] = n + step
            size[a] = na + nb
            nn[a] = -1
            mind[a] = INFINITY

            for k in range(n):
                if not active[k] or k == a:
                    continue
                if nn[k] == a or nn[k] == b:
                    _rescan(d, node, active, nn, mind, k, n)
                else:
                    v = _get(d, a, k, n)
                    if v < mind[k]:
                        mind[k] = v
                        nn[k] = a

    return left_out, right_out, height_out, size_out


cdef void _rescan(double[::1] d, cnp.int64_t[::1] node, cnp.uint8_t[::1] active,
                  cnp.int64_t[::1] nn, double[::1] mind, Py_ssize_t k,
                  Py_ssize_t n) nogil:
    cdef Py_ssize_t j, bj = -1
    cdef double v, bv = INFINITY
    cdef cnp.int64_t bid = 0
    for j in range(n):
        if not active[j] or j == k or node[j] <= node[k]:
            continue
        v = _get(d, j, k, n)
        if bj < 0 or v < bv or (v == bv and node[j] < bid):
            bj = j
            bv = v
            bid = node[j]
    nn[k] = bj
    mind[k] = bv


def es_from_positions(cnp.int64_t[:, ::1] positions, Py_ssize_t n_total):
    """Unweighted running-sum enrichment score for each row of sorted hit positions.

    The running sum is tracked in units of 1 / (s * (N - s)) so that extremes
    and the top-versus-bottom tie are decided exactly.
    """
    cdef Py_ssize_t rows = positions.shape[0]
    cdef Py_ssize_t s = positions.shape[1]
    out = np.empty(rows, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t r, i
    cdef cnp.int64_t miss_w = n_total - s
    cdef cnp.int64_t top, bottom, before, after, p
    cdef double scale = <double>(s * miss_w)
    with nogil:
        for r in range(rows):
            top = 0
            bottom = 0
            for i in range(s):
                p = positions[r, i]
                before = i * miss_w - (p - i) * s
                after = before + miss_w
                if before < bottom:
                    bottom = before
                if after > top:
                    top = after
            o[r] = (<double>top if top >= -bottom else <double>bottom) / scale
    return out
